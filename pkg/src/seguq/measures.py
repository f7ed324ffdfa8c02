"""Pixel-level uncertainty measures and the family -> measure semantics table.

All entropies are in nats with ``0 * ln 0 = 0``. For sampling models the
predictive entropy splits exactly into expected entropy plus mutual
information; which of the two terms is read as aleatoric or epistemic depends
on what the sample axis marginalizes over (see :func:`semantics_for`).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import entr

from .core import (
    NORM_TOL,
    Measure,
    ModelFamily,
    UncertaintyMap,
    UncertaintyType,
    UQError,
    as_stack,
)

MI_ROUNDOFF = 1e-12


@dataclass(frozen=True)
class MeasureSemantics:
    family: ModelFamily
    mapping: tuple

    def claimed_type(self, measure: Measure) -> UncertaintyType:
        for m, t in self.mapping:
            if m is measure:
                return t
        raise UQError("UNSUPPORTED_MEASURE", f"{measure.value} is not defined for {self.family.value}")

    @property
    def measures(self) -> tuple:
        return tuple(m for m, _ in self.mapping)


_BAYESIAN = (
    (Measure.PE, UncertaintyType.PU),
    (Measure.MI, UncertaintyType.EU),
    (Measure.EE, UncertaintyType.AU),
)

_SEMANTICS = {
    ModelFamily.DETERMINISTIC: ((Measure.ONE_MINUS_MSR, UncertaintyType.PU),),
    ModelFamily.TTD: _BAYESIAN,
    ModelFamily.ENSEMBLE: _BAYESIAN,
    # augmentation variable: disagreement across augmentations signals novelty
    ModelFamily.TTA: _BAYESIAN,
    # label-variability latent: disagreement across latent draws is rater ambiguity
    ModelFamily.SSN: (
        (Measure.PE, UncertaintyType.PU),
        (Measure.MI, UncertaintyType.AU),
        (Measure.EE, UncertaintyType.EU),
    ),
}


def semantics_for(family: ModelFamily) -> MeasureSemantics:
    family = ModelFamily(family)
    return MeasureSemantics(family, _SEMANTICS[family])


def shannon_entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1 or (p < 0).any() or abs(p.sum() - 1.0) > NORM_TOL:
        raise UQError("INVALID_DISTRIBUTION", f"not a probability vector: {p}")
    return float(entr(p).sum())


def _entropy_along(p: np.ndarray, axis: int) -> np.ndarray:
    return entr(p).sum(axis=axis)


def _needs_sampling(stack) -> None:
    if stack.n_samples < 2:
        raise UQError("NEEDS_SAMPLING", f"S={stack.n_samples}; expected entropy and MI need S >= 2")


def predictive_entropy(stack, claimed_type: UncertaintyType = UncertaintyType.PU) -> UncertaintyMap:
    s = as_stack(stack)
    return UncertaintyMap(_entropy_along(s.data.mean(axis=0), 0), Measure.PE, claimed_type)


def expected_entropy(stack, claimed_type: UncertaintyType = UncertaintyType.AU) -> UncertaintyMap:
    s = as_stack(stack)
    _needs_sampling(s)
    return UncertaintyMap(_entropy_along(s.data, 1).mean(axis=0), Measure.EE, claimed_type)


def _mi_from(pe: np.ndarray, ee: np.ndarray) -> np.ndarray:
    mi = pe - ee
    worst = mi.min() if mi.size else 0.0
    if worst < -MI_ROUNDOFF:
        raise UQError("INTERNAL_CONSISTENCY", f"mutual information {worst:.3g} below round-off guard")
    return np.maximum(mi, 0.0)


def mutual_information(stack, claimed_type: UncertaintyType = UncertaintyType.EU) -> UncertaintyMap:
    s = as_stack(stack)
    _needs_sampling(s)
    pe = _entropy_along(s.data.mean(axis=0), 0)
    ee = _entropy_along(s.data, 1).mean(axis=0)
    return UncertaintyMap(_mi_from(pe, ee), Measure.MI, claimed_type)


def msr_uncertainty(stack, claimed_type: UncertaintyType = UncertaintyType.PU) -> UncertaintyMap:
    """``1 - max_c p_c`` for a single-sample stack.

    Sampled stacks must be collapsed by the caller (e.g. via ``mean_prediction``).
    """
    s = as_stack(stack)
    if s.n_samples != 1:
        raise UQError("WRONG_SAMPLE_COUNT", f"S={s.n_samples}, expected 1")
    return UncertaintyMap(np.clip(1.0 - s.data[0].max(axis=0), 0.0, None), Measure.ONE_MINUS_MSR, claimed_type)


def decompose(stack) -> dict:
    """PE, EE and MI maps from one pass, using the generic claimed types."""
    s = as_stack(stack)
    _needs_sampling(s)
    pe = _entropy_along(s.data.mean(axis=0), 0)
    ee = _entropy_along(s.data, 1).mean(axis=0)
    return {
        Measure.PE: UncertaintyMap(pe, Measure.PE, UncertaintyType.PU),
        Measure.EE: UncertaintyMap(ee, Measure.EE, UncertaintyType.AU),
        Measure.MI: UncertaintyMap(_mi_from(pe, ee), Measure.MI, UncertaintyType.EU),
    }


def compute_measures(stack, family: ModelFamily) -> dict:
    """All uncertainty maps defined for ``family``, tagged with its claimed types."""
    sem = semantics_for(family)
    s = as_stack(stack)
    if sem.family is ModelFamily.DETERMINISTIC:
        if s.n_samples != 1:
            raise UQError("WRONG_SAMPLE_COUNT", f"deterministic model with S={s.n_samples}")
        return {Measure.ONE_MINUS_MSR: msr_uncertainty(s)}
    maps = decompose(s)
    return {m: UncertaintyMap(maps[m].data, m, t) for m, t in sem.mapping}
