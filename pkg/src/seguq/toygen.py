"""Synthetic 3D toy data: ambiguous blurred spheres rated by three raters,
shifted objects for distribution-shift cases, and the scenario splits.

Every case draws from its own generator seeded by ``(master_seed, index)``
through :class:`numpy.random.SeedSequence`, so cases can be produced in any
order or in parallel.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import CaseRecord, RaterSet, Role, Split, UQError

RATER_VOLUME_FRACTIONS = (0.10, 0.55, 1.0)
TRAIN_INTENSITY = (0.6, 0.9)
OOD_INTENSITY = (0.15, 0.4)
BLUR_SIGMA = (1.5, 3.0)
NOISE_SD = 0.05
DEFAULT_EDGE = 48


class ToyObject(str, enum.Enum):
    SPHERE = "SPHERE"
    CUBE = "CUBE"


class Shift(str, enum.Enum):
    SHAPE = "SHAPE"
    INTENSITY = "INTENSITY"
    POSITION = "POSITION"


class ScenarioId(str, enum.Enum):
    S1 = "S1"
    S2 = "S2"
    S3A = "S3A"
    S3B = "S3B"


@dataclass(frozen=True)
class ToyScenario:
    id: ScenarioId
    n_train: int
    n_train_blur: int
    n_test_iid: int
    n_test_iid_blur: int
    n_test_ood: int

    @property
    def n_cases(self) -> int:
        return self.n_train + self.n_test_iid + self.n_test_ood


SCENARIOS = {
    ScenarioId.S1: ToyScenario(ScenarioId.S1, 200, 200, 20, 20, 0),
    ScenarioId.S2: ToyScenario(ScenarioId.S2, 200, 0, 21, 0, 21),
    ScenarioId.S3A: ToyScenario(ScenarioId.S3A, 200, 100, 21, 0, 21),
    ScenarioId.S3B: ToyScenario(ScenarioId.S3B, 200, 100, 42, 21, 21),
}


def get_scenario(scenario) -> ToyScenario:
    if isinstance(scenario, ToyScenario):
        return scenario
    if isinstance(scenario, ScenarioId):
        return SCENARIOS[scenario]
    return SCENARIOS[ScenarioId(str(scenario).upper())]


@dataclass(frozen=True)
class ToyCaseSpec:
    object: ToyObject = ToyObject.SPHERE
    radius: float = 9.0
    center: tuple = (24.0, 24.0, 24.0)
    intensity: float = 0.75
    blur_sigma: float = 0.0
    background_noise_sd: float = NOISE_SD
    ood: bool = False
    allow_out_of_frame: bool = False

    def __post_init__(self):
        object.__setattr__(self, "object", ToyObject(self.object))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))


def cube_edge(radius: float) -> float:
    """Edge of the cube with the volume of a sphere of ``radius``."""
    return (4.0 * math.pi * radius ** 3 / 3.0) ** (1.0 / 3.0)


def _grid(volume_edge: int, ndim: int = 3) -> list:
    ax = np.arange(volume_edge, dtype=np.float64)
    return np.meshgrid(*([ax] * ndim), indexing="ij", sparse=True)


def object_mask(obj: ToyObject, radius: float, center: Sequence, volume_edge: int) -> np.ndarray:
    grid = _grid(volume_edge, len(center))
    if obj is ToyObject.SPHERE:
        d2 = sum((g - c) ** 2 for g, c in zip(grid, center))
        return d2 <= radius ** 2
    half = cube_edge(radius) / 2.0
    inside = np.ones((volume_edge,) * len(center), dtype=bool)
    for g, c in zip(grid, center):
        inside = inside & (np.abs(g - c) <= half)
    return inside


def _extent(spec: ToyCaseSpec) -> float:
    return spec.radius if spec.object is ToyObject.SPHERE else cube_edge(spec.radius) / 2.0


def _check_spec(spec: ToyCaseSpec, volume_edge: int) -> None:
    if spec.radius < 3:
        raise UQError("INVALID_SPEC", f"radius {spec.radius} < 3 voxels")
    if spec.blur_sigma < 0:
        raise UQError("INVALID_SPEC", f"blur_sigma {spec.blur_sigma} < 0")
    if spec.allow_out_of_frame:
        return
    e = _extent(spec)
    for c in spec.center:
        if c - e < 0 or c + e > volume_edge - 1:
            raise UQError("OBJECT_OUT_OF_BOUNDS", f"object at {spec.center} with extent {e:.2f} "
                                                  f"leaves a volume of edge {volume_edge}")


def _streams(seed) -> tuple:
    noise_ss, shift_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(noise_ss), np.random.default_rng(shift_ss)


def _render(spec: ToyCaseSpec, masks: list, volume_edge: int, rng: np.random.Generator) -> np.ndarray:
    if spec.blur_sigma > 0:
        # crisp core at the innermost rater, intensity fading outward across the shell
        fade = gaussian_filter(masks[1].astype(np.float64), spec.blur_sigma)
        profile = np.maximum(masks[0].astype(np.float64), fade)
    else:
        profile = masks[-1].astype(np.float64)
    image = spec.intensity * profile
    if spec.background_noise_sd > 0:
        image = image + rng.normal(0.0, spec.background_noise_sd, image.shape)
    return np.clip(image, 0.0, 1.0)


def generate_toy_case(spec: ToyCaseSpec, volume_edge: int = DEFAULT_EDGE, seed=0) -> tuple:
    """Image volume and three nested rater masks for one case.

    Rater volumes are 10%, 55% and 100% of the outermost mask (radii scaled by
    the cube root of the volume fraction). Without blur all raters agree on
    the crisp object.
    """
    _check_spec(spec, volume_edge)
    noise_rng, _ = _streams(seed)
    if spec.blur_sigma > 0:
        masks = [object_mask(spec.object, spec.radius * f ** (1.0 / 3.0), spec.center, volume_edge)
                 for f in RATER_VOLUME_FRACTIONS]
    else:
        crisp = object_mask(spec.object, spec.radius, spec.center, volume_edge)
        masks = [crisp] * len(RATER_VOLUME_FRACTIONS)
    image = _render(spec, masks, volume_edge, noise_rng)
    return image, RaterSet(np.stack(masks).astype(np.uint8))


def shifted_spec(base_spec: ToyCaseSpec, shift: Optional[Shift], rng: np.random.Generator,
                 volume_edge: int = DEFAULT_EDGE) -> ToyCaseSpec:
    spec = replace(base_spec, blur_sigma=0.0)
    if shift is None:
        return spec
    shift = Shift(shift)
    if shift is Shift.SHAPE:
        return replace(spec, object=ToyObject.CUBE, ood=True)
    if shift is Shift.INTENSITY:
        return replace(spec, intensity=float(rng.uniform(*OOD_INTENSITY)), ood=True)
    axis = int(rng.integers(len(spec.center)))
    side = int(rng.integers(2))
    # 20-45% of the radius past the border
    past = spec.radius * float(rng.uniform(0.2, 0.45))
    center = list(spec.center)
    center[axis] = (volume_edge - 1 + past) if side else -past
    return replace(spec, center=tuple(center), ood=True, allow_out_of_frame=True)


def generate_shift_case(base_spec: ToyCaseSpec, shift: Optional[Shift], seed=0,
                        volume_edge: int = DEFAULT_EDGE) -> tuple:
    """Crisp case under a shape, intensity or position shift, with one rater."""
    noise_rng, shift_rng = _streams(seed)
    spec = shifted_spec(base_spec, shift, shift_rng, volume_edge)
    _check_spec(spec, volume_edge)
    mask = object_mask(spec.object, spec.radius, spec.center, volume_edge)
    image = _render(spec, [mask], volume_edge, noise_rng)
    return image, RaterSet(mask[None].astype(np.uint8))


@dataclass(frozen=True)
class ToyCaseStub:
    """A manifest entry that renders its volume and raters on demand."""

    case_id: str
    split: Split
    role: Role
    spec: ToyCaseSpec
    seed: tuple
    volume_edge: int = DEFAULT_EDGE
    shift: Optional[Shift] = None
    scenario_tags: tuple = field(default_factory=tuple)

    @property
    def blurred(self) -> bool:
        return self.spec.blur_sigma > 0

    def generate(self) -> tuple:
        if self.split is Split.OOD:
            return generate_shift_case(self.spec, self.shift, self.seed, self.volume_edge)
        return generate_toy_case(self.spec, self.volume_edge, self.seed)

    def materialize(self) -> CaseRecord:
        image, raters = self.generate()
        return CaseRecord(self.case_id, self.split, self.role, raters=raters, image=image,
                          scenario_tags=self.scenario_tags)


def case_seed(master_seed: int, index: int) -> tuple:
    return (int(master_seed), int(index))


def sample_base_spec(rng: np.random.Generator, volume_edge: int, blurred: bool) -> ToyCaseSpec:
    r_lo, r_hi = volume_edge / 8.0, volume_edge / 4.0
    radius = float(rng.uniform(max(r_lo, 3.0), max(r_hi, 3.0)))
    margin = radius + 1.0
    center = tuple(float(rng.uniform(margin, volume_edge - 1 - margin)) for _ in range(3))
    return ToyCaseSpec(
        object=ToyObject.SPHERE,
        radius=radius,
        center=center,
        intensity=float(rng.uniform(*TRAIN_INTENSITY)),
        blur_sigma=float(rng.uniform(*BLUR_SIGMA)) if blurred else 0.0,
    )


_SHIFT_CYCLE = (Shift.SHAPE, Shift.INTENSITY, Shift.POSITION)


def _stub(prefix: str, index: int, master_seed: int, split: Split, role: Role, blurred: bool,
          volume_edge: int, tags: tuple, shift: Optional[Shift] = None) -> ToyCaseStub:
    seed = case_seed(master_seed, index)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    spec = sample_base_spec(rng, volume_edge, blurred)
    kind = ["blur" if blurred else "crisp"] + ([shift.value.lower()] if shift else [])
    return ToyCaseStub(f"{prefix}_{index:04d}", split, role, spec, seed, volume_edge, shift,
                       tuple(tags) + tuple(kind))


def build_scenario(scenario, master_seed: int = 0, volume_edge: int = DEFAULT_EDGE) -> list:
    """Case stubs with the exact train/test counts of one toy scenario."""
    sc = get_scenario(scenario)
    tag = (sc.id.value,)
    prefix = sc.id.value.lower()
    stubs, i = [], 0
    for k in range(sc.n_train):
        stubs.append(_stub(prefix, i, master_seed, Split.IID, Role.TRAIN, k < sc.n_train_blur, volume_edge, tag))
        i += 1
    for k in range(sc.n_test_iid):
        stubs.append(_stub(prefix, i, master_seed, Split.IID, Role.TEST, k < sc.n_test_iid_blur, volume_edge, tag))
        i += 1
    for k in range(sc.n_test_ood):
        stubs.append(_stub(prefix, i, master_seed, Split.OOD, Role.TEST, False, volume_edge, tag,
                           _SHIFT_CYCLE[k % len(_SHIFT_CYCLE)]))
        i += 1
    return stubs


def build_downstream_manifest(master_seed: int = 0, volume_edge: int = DEFAULT_EDGE, *,
                              n_val: int = 10, n_test_iid: int = 20, n_test_ood: int = 21,
                              n_pool: int = 20, blur_fraction: float = 0.5) -> list:
    """Toy case stubs for the downstream tasks: VAL, TEST (i.i.d. + OoD) and a mixed POOL.

    Half of each i.i.d. group carries rater ambiguity; half of the pool is shifted.
    """
    tag = ("DOWNSTREAM",)
    stubs, i = [], 0

    def iid(role, n):
        nonlocal i
        n_blur = int(round(n * blur_fraction))
        for k in range(n):
            stubs.append(_stub("ds", i, master_seed, Split.IID, role, k < n_blur, volume_edge, tag))
            i += 1

    def ood(role, n):
        nonlocal i
        for k in range(n):
            stubs.append(_stub("ds", i, master_seed, Split.OOD, role, False, volume_edge, tag,
                               _SHIFT_CYCLE[k % len(_SHIFT_CYCLE)]))
            i += 1

    iid(Role.VAL, n_val)
    iid(Role.TEST, n_test_iid)
    ood(Role.TEST, n_test_ood)
    iid(Role.POOL, n_pool - n_pool // 2)
    ood(Role.POOL, n_pool // 2)
    return stubs


def induce_label_ambiguity(label_map, flip_pairs: Sequence, p: float, seed=0,
                           n_classes: Optional[int] = None) -> np.ndarray:
    """Relabel whole structures: each listed class present flips to its partner with probability ``p``.

    Flips are decided on the input map, so a class flipped into is not flipped again.
    """
    if not 0.0 <= p <= 1.0:
        raise UQError("CONFIG_INVALID", f"p={p}")
    labels = np.asarray(label_map)
    for a, b in flip_pairs:
        for c in (a, b):
            if c < 0 or (n_classes is not None and c >= n_classes):
                raise UQError("UNKNOWN_CLASS", f"class {c}")
    rng = np.random.default_rng(seed)
    out = labels.copy()
    for a, b in flip_pairs:
        draw = rng.random()
        if np.any(labels == a) and draw < p:
            out[labels == a] = b
    return out
