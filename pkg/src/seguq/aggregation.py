"""Reduce a pixel uncertainty map to one score per image."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import UncertaintyMap, UQError


class Strategy(str, enum.Enum):
    IMAGE_SUM = "IMAGE_SUM"
    PATCH_MAX = "PATCH_MAX"
    THRESHOLD_MEAN = "THRESHOLD_MEAN"


@dataclass(frozen=True)
class AggregationSpec:
    strategy: Strategy
    window_edge: int = 10
    threshold: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.window_edge < 1:
            raise UQError("CONFIG_INVALID", f"window_edge={self.window_edge}")
        if self.threshold is not None and self.threshold < 0:
            raise UQError("CONFIG_INVALID", f"negative threshold {self.threshold}")

    @property
    def key(self) -> str:
        return self.strategy.value

    def with_threshold(self, threshold: float) -> "AggregationSpec":
        return AggregationSpec(self.strategy, self.window_edge, float(threshold))

    def warning_tags(self, single_object: bool) -> list:
        """Tags for pairings the original protocol avoided.

        Image sums track object size on single-object data; the threshold rule
        depends on a foreground ratio that multi-class scenes do not have.
        """
        if self.strategy is Strategy.IMAGE_SUM and single_object:
            return ["IMAGE_SUM_SIZE_CONFOUNDED"]
        if self.strategy is Strategy.THRESHOLD_MEAN and not single_object:
            return ["THRESHOLD_MEAN_MULTI_OBJECT"]
        return []


def _values(m) -> np.ndarray:
    return m.data if isinstance(m, UncertaintyMap) else np.asarray(m, dtype=np.float64)


def aggregate_image_sum(umap) -> float:
    return float(_values(umap).sum())


def window_sums(values: np.ndarray, window_edge: int) -> np.ndarray:
    """Sums over every stride-1 valid window, via separable prefix sums.

    Windows are clipped per axis to the array extent.
    """
    out = np.asarray(values, dtype=np.float64)
    for axis in range(out.ndim):
        w = min(window_edge, out.shape[axis])
        pad = [(0, 0)] * out.ndim
        pad[axis] = (1, 0)
        cs = np.pad(np.cumsum(out, axis=axis), pad)
        n = cs.shape[axis]
        out = np.take(cs, np.arange(w, n), axis=axis) - np.take(cs, np.arange(0, n - w), axis=axis)
    return out


def aggregate_patch_max(umap, window_edge: int = 10) -> float:
    if window_edge < 1:
        raise UQError("CONFIG_INVALID", f"window_edge={window_edge}")
    v = _values(umap)
    if v.size == 0:
        return 0.0
    return float(window_sums(v, window_edge).max())


def aggregate_threshold_mean(umap, threshold: float) -> float:
    if threshold < 0:
        raise UQError("CONFIG_INVALID", f"negative threshold {threshold}")
    v = _values(umap)
    sel = v[v > threshold]
    return float(sel.mean()) if sel.size else 0.0


def compute_threshold(val_maps: Sequence, val_pred_masks: Sequence, positive_class: int = 1) -> float:
    """Quantile threshold from the mean predicted foreground ratio on validation cases.

    With ``alpha`` the mean foreground fraction, the threshold is the
    ``1 - alpha`` quantile (linear interpolation between order statistics) of
    all pooled validation uncertainty values.
    """
    if len(val_maps) == 0 or len(val_maps) != len(val_pred_masks):
        raise UQError("EMPTY_VALIDATION", f"{len(val_maps)} maps, {len(val_pred_masks)} masks")
    alpha = float(np.mean([np.mean(np.asarray(m) == positive_class) for m in val_pred_masks]))
    pooled = np.concatenate([_values(m).ravel() for m in val_maps])
    return float(np.quantile(pooled, 1.0 - alpha, method="linear"))


def aggregate(umap, spec: AggregationSpec) -> float:
    if spec.strategy is Strategy.IMAGE_SUM:
        return aggregate_image_sum(umap)
    if spec.strategy is Strategy.PATCH_MAX:
        return aggregate_patch_max(umap, spec.window_edge)
    if spec.threshold is None:
        raise UQError("CONFIG_INVALID", "THRESHOLD_MEAN needs a threshold")
    return aggregate_threshold_mean(umap, spec.threshold)
