"""Synthetic prediction models standing in for trained networks.

Mean logits follow the signed distance to the rater-averaged boundary. The
logit scale is ``fidelity / width`` where ``width = hypot(border_softness,
rater spread)``: with raters disagreeing about where the border lies, the mean
foreground probability approaches the fraction of raters that would label a
voxel foreground (a probit-like ramp across the ambiguity shell), so the
ambiguity shows up inside every sample. Between-sample variation is Gaussian
logit noise, inflated on OoD cases.

The SSN-style simulator instead puts the rater variability on the sample
axis: every sample commits to one interpolated rater contour.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.special import expit, softmax

from .core import CaseRecord, ModelFamily, ProbabilityStack, RaterSet, Split, UQError

# per-class logit gain; a binary logit difference of 1.7 per width unit
# makes the sigmoid ramp track a standard normal CDF
LOGIT_GAIN = 0.85


@dataclass(frozen=True)
class SimulatorConfig:
    family: ModelFamily = ModelFamily.TTD
    n_samples: int = 10
    fidelity: float = 1.0
    sample_spread: float = 0.6
    ood_spread_multiplier: float = 4.0
    border_softness: float = 0.75
    seed: int = 0
    n_classes: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "family", ModelFamily(self.family))
        validate_config(self)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["family"] = self.family.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimulatorConfig":
        return cls(**d)


def validate_config(cfg: SimulatorConfig) -> None:
    problems = []
    if cfg.family is ModelFamily.DETERMINISTIC and cfg.n_samples != 1:
        problems.append(f"deterministic model needs n_samples=1, got {cfg.n_samples}")
    if cfg.family is not ModelFamily.DETERMINISTIC and cfg.n_samples < 2:
        problems.append(f"{cfg.family.value} needs n_samples >= 2, got {cfg.n_samples}")
    if not 0.0 <= cfg.fidelity <= 1.0:
        problems.append(f"fidelity {cfg.fidelity} outside [0, 1]")
    if cfg.sample_spread < 0 or cfg.border_softness < 0:
        problems.append("sample_spread and border_softness must be >= 0")
    if cfg.ood_spread_multiplier < 1:
        problems.append(f"ood_spread_multiplier {cfg.ood_spread_multiplier} < 1")
    if cfg.n_classes is not None and cfg.n_classes < 2:
        problems.append(f"n_classes {cfg.n_classes} < 2")
    if problems:
        raise UQError("CONFIG_INVALID", "; ".join(problems))


_FAMILY_DEFAULTS = {
    ModelFamily.DETERMINISTIC: dict(n_samples=1, sample_spread=0.0),
    ModelFamily.TTD: dict(n_samples=10, sample_spread=0.6),
    ModelFamily.ENSEMBLE: dict(n_samples=5, sample_spread=0.8),
    ModelFamily.TTA: dict(n_samples=10, sample_spread=0.5),
    ModelFamily.SSN: dict(n_samples=10, sample_spread=0.2),
}


def default_config(family: ModelFamily, seed: int = 0, **overrides) -> SimulatorConfig:
    family = ModelFamily(family)
    kw = dict(_FAMILY_DEFAULTS[family])
    kw.update(overrides)
    return SimulatorConfig(family=family, seed=seed, **kw)


def signed_distance(mask: np.ndarray) -> np.ndarray:
    """Positive inside, negative outside, half a voxel at the border."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return np.full(m.shape, -float(sum(m.shape)))
    if m.all():
        return np.full(m.shape, float(sum(m.shape)))
    inside = distance_transform_edt(m)
    outside = distance_transform_edt(~m)
    return np.where(m, inside - 0.5, -(outside - 0.5))


def _n_classes(raters: RaterSet, cfg: SimulatorConfig) -> int:
    top = int(raters.masks.max()) + 1 if raters.masks.size else 1
    c = cfg.n_classes or max(2, top)
    raters.check_classes(c)
    return c


def _case_rng(case_id: str, cfg: SimulatorConfig, n: int) -> list:
    ss = np.random.SeedSequence([int(cfg.seed), zlib.crc32(case_id.encode())])
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def _spread(case: CaseRecord, cfg: SimulatorConfig) -> float:
    return cfg.sample_spread * (cfg.ood_spread_multiplier if case.split is Split.OOD else 1.0)


def _scaled(sd: np.ndarray, width, fidelity: float) -> np.ndarray:
    width = np.broadcast_to(np.asarray(width, dtype=np.float64), sd.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = LOGIT_GAIN * fidelity * sd / width
    # zero width is a hard step; zero fidelity an uninformative prediction
    hard = np.where(sd > 0, np.inf, -np.inf) if fidelity > 0 else np.zeros_like(sd)
    return np.where(width > 0, z, hard)


def _to_probs(logits: np.ndarray) -> np.ndarray:
    """Softmax over axis 1; infinite logits give exact one-hot rows."""
    inf = np.isinf(logits)
    if not inf.any():
        if logits.shape[1] == 2:
            p1 = expit(logits[:, 1] - logits[:, 0])
            return np.stack([1.0 - p1, p1], axis=1)
        return softmax(logits, axis=1)
    pos = np.isposinf(logits)
    any_pos = pos.any(axis=1, keepdims=True)
    finite = np.where(inf, 0.0, logits)
    finite = np.where(np.isneginf(logits), -np.inf, finite)
    soft = softmax(np.where(any_pos, 0.0, finite), axis=1)
    hard = pos / np.maximum(pos.sum(axis=1, keepdims=True), 1)
    return np.where(any_pos, hard, soft)


def _noise(rngs: list, shape: tuple, n_classes: int, spread: float) -> np.ndarray:
    out = np.zeros((len(rngs), n_classes) + shape)
    if spread == 0:
        return out
    if n_classes == 2:
        # only the logit difference matters for two classes
        for s, r in enumerate(rngs):
            out[s, 1] = r.normal(0.0, spread, shape)
        return out
    # per-class sd spread/sqrt(2): any pairwise logit difference has sd ``spread``
    for s, r in enumerate(rngs):
        out[s] = r.normal(0.0, spread / np.sqrt(2.0), (n_classes,) + shape)
    return out


def rater_geometry(raters: RaterSet, n_classes: int) -> np.ndarray:
    """Signed distances ``[C, R, *spatial]`` per class and rater.

    Costly (one distance transform per distinct mask); callers simulating the
    same case repeatedly should compute it once and pass it as ``geometry``.
    """
    cache = {}

    def sd_of(mask: np.ndarray) -> np.ndarray:
        key = np.packbits(mask).tobytes()
        if key not in cache:
            cache[key] = signed_distance(mask)
        return cache[key]

    if n_classes == 2:
        fg = np.stack([sd_of(m == 1) for m in raters.masks])
        return np.stack([-fg, fg])
    return np.stack([np.stack([sd_of(m == c) for m in raters.masks]) for c in range(n_classes)])


def _geometry(case: CaseRecord, C: int, geometry: Optional[np.ndarray]) -> np.ndarray:
    if geometry is None:
        return rater_geometry(case.raters, C)
    if geometry.shape != (C, case.raters.n_raters) + case.raters.shape:
        raise UQError("SHAPE_MISMATCH", f"geometry {geometry.shape} does not fit case {case.case_id}")
    return geometry


def simulate_predictions(case: CaseRecord, cfg: SimulatorConfig,
                         geometry: Optional[np.ndarray] = None) -> ProbabilityStack:
    validate_config(cfg)
    if case.raters is None:
        raise UQError("CONFIG_INVALID", f"case {case.case_id} has no reference masks")
    C = _n_classes(case.raters, cfg)
    sd = _geometry(case, C, geometry)
    width = np.hypot(cfg.border_softness, sd.std(axis=1))
    mean_logit = _scaled(sd.mean(axis=1), width, cfg.fidelity)
    rngs = _case_rng(case.case_id, cfg, cfg.n_samples + 1)
    spread = _spread(case, cfg) if cfg.n_samples > 1 else 0.0
    logits = mean_logit[None] + _noise(rngs[:-1], case.raters.shape, C, spread)
    return ProbabilityStack(_to_probs(logits))


def simulate_ssn_samples(case: CaseRecord, cfg: SimulatorConfig,
                         geometry: Optional[np.ndarray] = None) -> ProbabilityStack:
    """Samples that each follow one contour drawn from the rater family.

    Raters are ordered by foreground volume and each sample interpolates the
    signed distances of two neighbours at a uniform position, so samples
    spread across the range of rater opinions.
    """
    validate_config(cfg)
    if case.raters is None or case.raters.n_raters < 2:
        raise UQError("NEEDS_RATERS", f"case {case.case_id}: SSN simulation needs R >= 2")
    C = _n_classes(case.raters, cfg)
    R = case.raters.n_raters
    order = np.argsort([np.count_nonzero(m) for m in case.raters.masks], kind="stable")
    sd = _geometry(case, C, geometry)[:, order]
    rngs = _case_rng(case.case_id, cfg, cfg.n_samples + 1)
    noise = _noise(rngs[:-1], case.raters.shape, C, _spread(case, cfg))
    pos = rngs[-1].uniform(0.0, R - 1, cfg.n_samples)
    logits = np.empty_like(noise)
    for s, t in enumerate(pos):
        i = min(int(t), R - 2)
        frac = t - i
        target = (1.0 - frac) * sd[:, i] + frac * sd[:, i + 1]
        logits[s] = _scaled(target, cfg.border_softness, cfg.fidelity) + noise[s]
    return ProbabilityStack(_to_probs(logits))


def simulate_case(case: CaseRecord, cfg: SimulatorConfig,
                  geometry: Optional[np.ndarray] = None) -> ProbabilityStack:
    """Dispatch on family: SSN samples label variability where raters allow it."""
    if cfg.family is ModelFamily.SSN and case.raters is not None and case.raters.n_raters >= 2:
        return simulate_ssn_samples(case, cfg, geometry)
    return simulate_predictions(case, cfg, geometry)


def with_stack(case: CaseRecord, cfg: SimulatorConfig) -> CaseRecord:
    return replace(case, stack=simulate_case(case, cfg))
