"""Domain types, validation and shared array helpers.

Class scores are always post-softmax probabilities. A stack has layout
``[S, C, *spatial]`` where the sample axis carries draws of whatever random
variable the prediction model marginalizes over (weights, augmentations or
a label-variability latent).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

NORM_TOL = 1e-6


class UQError(ValueError):
    """Error carrying a stable machine-readable ``code``."""

    def __init__(self, code: str, message: str = "", index: Optional[tuple] = None):
        self.code = code
        self.index = index
        super().__init__(f"{code}: {message}" if message else code)


class ModelFamily(str, enum.Enum):
    DETERMINISTIC = "DETERMINISTIC"
    TTD = "TTD"
    ENSEMBLE = "ENSEMBLE"
    TTA = "TTA"
    SSN = "SSN"


class Measure(str, enum.Enum):
    PE = "PE"
    EE = "EE"
    MI = "MI"
    ONE_MINUS_MSR = "ONE_MINUS_MSR"
    # reference map built from rater disagreement, not a predicted measure
    RATER_VARIANCE = "RATER_VARIANCE"


class UncertaintyType(str, enum.Enum):
    PU = "PU"
    AU = "AU"
    EU = "EU"


class Split(str, enum.Enum):
    IID = "IID"
    OOD = "OOD"


class Role(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"
    POOL = "POOL"


def _frozen(a: np.ndarray) -> np.ndarray:
    if not a.flags.writeable and a.flags.c_contiguous:
        return a
    a = np.array(a, order="C", copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ValidationResult:
    ok: bool
    code: Optional[str] = None
    index: Optional[tuple] = None
    message: str = ""

    def raise_if_invalid(self) -> None:
        if not self.ok:
            raise UQError(self.code or "INVALID", self.message, self.index)


@dataclass(frozen=True, eq=False)
class ProbabilityStack:
    """``S`` sampled class-probability fields for one case."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(np.asarray(self.data, dtype=np.float64)))

    @classmethod
    def checked(cls, data) -> "ProbabilityStack":
        """Validate ``data`` and renormalize rows that are off by at most the tolerance."""
        arr = np.array(data, dtype=np.float64)
        validate_stack(arr).raise_if_invalid()
        arr /= arr.sum(axis=1, keepdims=True)
        return cls(arr)

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def n_classes(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple:
        return self.data.shape[2:]


@dataclass(frozen=True, eq=False)
class RaterSet:
    """``R`` reference label maps, layout ``[R, *spatial]``."""

    masks: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masks)
        if m.ndim < 2:
            raise UQError("SHAPE_MISMATCH", "rater masks need layout [R, *spatial]")
        if not np.issubdtype(m.dtype, np.integer) and m.dtype != bool:
            raise UQError("DTYPE_UNSUPPORTED", f"rater masks must be integer labels, got {m.dtype}")
        if m.size and m.min() < 0:
            raise UQError("UNKNOWN_CLASS", "negative label in rater mask")
        object.__setattr__(self, "masks", _frozen(m.astype(np.uint8)))

    @property
    def n_raters(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple:
        return self.masks.shape[1:]

    def check_classes(self, n_classes: int) -> None:
        if self.masks.size and int(self.masks.max()) >= n_classes:
            raise UQError("UNKNOWN_CLASS", f"label {int(self.masks.max())} >= C={n_classes}")


@dataclass(frozen=True, eq=False)
class UncertaintyMap:
    data: np.ndarray
    measure: Measure
    claimed_type: UncertaintyType

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.size and d.min() < 0:
            raise UQError("NEGATIVE_UNCERTAINTY", f"min value {d.min()}")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class CaseRecord:
    case_id: str
    split: Split
    role: Role
    stack: Optional[ProbabilityStack] = None
    raters: Optional[RaterSet] = None
    image: Optional[np.ndarray] = None
    scenario_tags: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "scenario_tags", tuple(self.scenario_tags))
        if self.stack is not None and self.raters is not None:
            if self.stack.shape != self.raters.shape:
                raise UQError(
                    "SHAPE_MISMATCH",
                    f"case {self.case_id}: stack {self.stack.shape} vs raters {self.raters.shape}",
                )
            self.raters.check_classes(self.stack.n_classes)

    @property
    def is_ood(self) -> bool:
        return self.split is Split.OOD


def validate_stack(stack) -> ValidationResult:
    """Check every ProbabilityStack invariant; report the first violation."""
    data = stack.data if isinstance(stack, ProbabilityStack) else np.asarray(stack, dtype=np.float64)
    if data.ndim not in (4, 5):
        return ValidationResult(False, "SHAPE_MISMATCH", None,
                                f"expected [S, C, *spatial] with 2 or 3 spatial dims, got ndim={data.ndim}")
    if data.shape[0] < 1 or data.shape[1] < 2 or 0 in data.shape[2:]:
        return ValidationResult(False, "SHAPE_MISMATCH", None, f"degenerate shape {data.shape}")
    bad = ~np.isfinite(data) | (data < 0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        return ValidationResult(False, "NEGATIVE_PROBABILITY", idx, f"value {data[idx]} at {idx}")
    over = data > 1 + NORM_TOL
    if over.any():
        idx = tuple(int(i) for i in np.argwhere(over)[0])
        return ValidationResult(False, "ROW_NOT_NORMALIZED", idx, f"value {data[idx]} > 1 at {idx}")
    dev = np.abs(data.sum(axis=1) - 1.0)
    off = dev > NORM_TOL
    if off.any():
        i = np.argwhere(off)[0]
        idx = (int(i[0]), slice(None)) + tuple(int(j) for j in i[1:])
        return ValidationResult(False, "ROW_NOT_NORMALIZED", idx,
                                f"class sum deviates by {dev[tuple(i)]:.3g} at sample {i[0]}, pixel {tuple(i[1:])}")
    return ValidationResult(True)


def as_stack(stack) -> ProbabilityStack:
    if isinstance(stack, ProbabilityStack):
        validate_stack(stack).raise_if_invalid()
        return stack
    return ProbabilityStack.checked(stack)


def mean_prediction(stack) -> tuple[np.ndarray, np.ndarray]:
    """Sample-mean class probabilities ``[C, *spatial]`` and argmax labels.

    Ties in the argmax resolve to the lowest class index.
    """
    s = as_stack(stack)
    mean = s.data.mean(axis=0)
    # np.argmax returns the first maximal index, i.e. the lowest class
    labels = np.argmax(mean, axis=0).astype(np.uint8)
    return mean, labels


def binary(mask: np.ndarray, positive_class: int = 1) -> np.ndarray:
    return np.asarray(mask) == positive_class


def majority_vote(raters: RaterSet) -> np.ndarray:
    """Per-pixel most frequent rater label, ties to the lowest label."""
    m = raters.masks
    n_labels = int(m.max()) + 1 if m.size else 1
    counts = np.stack([(m == c).sum(axis=0) for c in range(n_labels)])
    return np.argmax(counts, axis=0).astype(np.uint8)


def check_same_shape(*arrays: Sequence) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) > 1:
        raise UQError("SHAPE_MISMATCH", f"shapes differ: {sorted(shapes)}")
