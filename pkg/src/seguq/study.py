"""Separation study and downstream-task evaluation over the
prediction-model x measure x aggregation grid."""
from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .aggregation import AggregationSpec, Strategy, aggregate, compute_threshold
from .core import (
    CaseRecord,
    Measure,
    ModelFamily,
    Role,
    Split,
    UncertaintyType,
    UQError,
    majority_vote,
    mean_prediction,
)
from .measures import compute_measures, semantics_for
from .metrics import (
    ace,
    al_improvement,
    aurc,
    auroc,
    e_aurc,
    ged,
    mean_rater_dice,
    ncc,
    platt_scale,
    rater_variance_map,
    sample_masks,
)
from .simulate import SimulatorConfig, default_config, rater_geometry, simulate_case

NONE = "NONE"


class Task(str, enum.Enum):
    NCC = "NCC"
    AUROC = "AUROC"
    AURC = "AURC"
    E_AURC = "E_AURC"
    ACE = "ACE"
    GED = "GED"
    DICE = "DICE"
    AL_QUERY = "AL_QUERY"
    AL_IMPROVEMENT = "AL_IMPROVEMENT"


class Component(str, enum.Enum):
    FAMILY = "FAMILY"
    MEASURE_TYPE = "MEASURE_TYPE"
    AGGREGATION = "AGGREGATION"


LOWER_IS_BETTER = frozenset({Task.AURC, Task.E_AURC, Task.ACE, Task.GED})

# measure types a task cannot meaningfully rank; dropped before component averaging
EXCLUDED_TYPES = {
    Task.AUROC: frozenset({UncertaintyType.AU.value}),
    Task.AL_QUERY: frozenset({UncertaintyType.AU.value}),
    Task.AL_IMPROVEMENT: frozenset({UncertaintyType.AU.value}),
}

EU_SCENARIOS = ("S2", "S3A", "S3B")


def n_threads() -> int:
    try:
        return max(1, int(os.environ.get("VALUES_THREADS", "1")))
    except ValueError:
        return 1


def _pmap(fn: Callable, items: Sequence) -> list:
    k = min(n_threads(), len(items))
    if k <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=k) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------- report types


ROW_FIELDS = ("dataset", "task", "split", "family", "measure", "claimed_type", "aggregation", "seed", "value")


@dataclass(frozen=True, order=True)
class ReportRow:
    dataset: str
    task: str
    split: str
    family: str
    measure: str
    claimed_type: str
    aggregation: str
    seed: int
    value: float

    @property
    def cell(self) -> tuple:
        return (self.dataset, self.task, self.split, self.family, self.measure, self.claimed_type, self.aggregation)


@dataclass(frozen=True)
class StudyReport:
    rows: tuple = ()
    notes: tuple = ()

    def __post_init__(self):
        for r in self.rows:
            if not math.isfinite(r.value):
                raise UQError("NON_FINITE", f"row {r}")
        object.__setattr__(self, "rows", tuple(sorted(self.rows)))
        object.__setattr__(self, "notes", tuple(sorted(set(self.notes))))

    def select(self, **kw) -> list:
        return [r for r in self.rows if all(getattr(r, k) == (v.value if isinstance(v, enum.Enum) else v)
                                              for k, v in kw.items())]

    def summary(self) -> list:
        """Mean and population sd over seeds per cell, in canonical order."""
        groups: dict = {}
        for r in self.rows:
            groups.setdefault(r.cell, []).append(r.value)
        out = []
        for cell in sorted(groups):
            v = np.asarray(groups[cell])
            out.append(dict(zip(ROW_FIELDS[:-2], cell), n_seeds=len(v), mean=float(v.mean()), sd=float(v.std())))
        return out

    def merged(self, other: "StudyReport") -> "StudyReport":
        return StudyReport(self.rows + other.rows, self.notes + other.notes)


@dataclass(frozen=True)
class StudyGrid:
    families: tuple = (ModelFamily.DETERMINISTIC, ModelFamily.TTD, ModelFamily.ENSEMBLE,
                       ModelFamily.TTA, ModelFamily.SSN)
    aggregations: tuple = (AggregationSpec(Strategy.PATCH_MAX), AggregationSpec(Strategy.THRESHOLD_MEAN))
    seeds: tuple = (0, 1, 2)
    simulators: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "families", tuple(ModelFamily(f) for f in self.families))
        object.__setattr__(self, "aggregations", tuple(self.aggregations))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.families or not self.aggregations or not self.seeds:
            raise UQError("CONFIG_INVALID", "study grid must be non-empty")

    def measures(self, family: ModelFamily) -> tuple:
        return semantics_for(family).mapping

    def simulator(self, family: ModelFamily, seed: int) -> SimulatorConfig:
        base = self.simulators.get(family) or self.simulators.get(family.value)
        if base is None:
            return default_config(family, seed)
        return replace(base, seed=seed)


# ------------------------------------------------------------------- helpers


def _materialize(cases: Iterable) -> list:
    out = []
    for c in cases:
        out.append(c if isinstance(c, CaseRecord) else c.materialize())
    return out


@dataclass
class _Prepared:
    """Cases with distance geometry computed once and reused across seeds."""

    case: CaseRecord
    geometry: Optional[np.ndarray]


def _prepare(cases: Sequence[CaseRecord]) -> list:
    def prep(c: CaseRecord) -> _Prepared:
        if c.stack is not None or c.raters is None:
            return _Prepared(c, None)
        n_classes = max(2, int(c.raters.masks.max()) + 1)
        return _Prepared(c, rater_geometry(c.raters, n_classes))
    return _pmap(prep, cases)


def _stacks(prepared: Sequence[_Prepared], cfg: Optional[SimulatorConfig]) -> list:
    """Simulated stacks, or the stored ones when no simulator is given."""
    def run(p: _Prepared):
        if cfg is None:
            if p.case.stack is None:
                raise UQError("MISSING_SPLIT", f"case {p.case.case_id} has neither a stack nor a simulator")
            return p.case.stack
        geom = p.geometry
        if geom is not None and cfg.n_classes not in (None, geom.shape[0]):
            geom = None
        return simulate_case(p.case, cfg, geom)
    return _pmap(run, prepared)


def _case_maps(stacks: Sequence, family: ModelFamily) -> list:
    return _pmap(lambda s: compute_measures(s, family), stacks)


def _val_pick(cases: Sequence[CaseRecord], n_val: int) -> list:
    """Evenly spaced TRAIN cases, so mixed blur/crisp training pools are both represented."""
    train = [c for c in cases if c.role is Role.TRAIN]
    if not train:
        return []
    idx = np.unique(np.linspace(0, len(train) - 1, min(n_val, len(train))).round().astype(int))
    return [train[i] for i in idx]


def _thresholds(val_maps: list, val_labels: list, measures: Iterable) -> dict:
    return {m: compute_threshold([vm[m] for vm in val_maps], val_labels) for m in measures}


def _scores(maps: list, measure: Measure, spec: AggregationSpec, thresholds: Optional[dict]) -> np.ndarray:
    if spec.strategy is Strategy.THRESHOLD_MEAN:
        if thresholds is None:
            raise UQError("MISSING_SPLIT", "threshold aggregation needs validation cases")
        spec = spec.with_threshold(thresholds[measure])
    return np.array([aggregate(m[measure], spec) for m in maps])


def _row(dataset, task, split, family, measure, ctype, agg, seed, value) -> ReportRow:
    enum_v = lambda x: x.value if isinstance(x, enum.Enum) else str(x)
    return ReportRow(enum_v(dataset), enum_v(task), enum_v(split), enum_v(family), enum_v(measure),
                     enum_v(ctype), enum_v(agg), int(seed), float(value))


# -------------------------------------------------------------- separation


def _scenario_key(k) -> str:
    return (k.value if isinstance(k, enum.Enum) else str(k)).upper()


def run_separation_study(manifests: Mapping, grid: StudyGrid, seeds: Optional[Sequence[int]] = None, *,
                         n_val: int = 10) -> StudyReport:
    """NCC against rater variance on S1 and i.i.d.-vs-OoD AUROC on the shift scenarios.

    ``manifests`` maps scenario ids to case stubs or records. NCC is averaged
    over i.i.d. test cases whose raters disagree somewhere; cases with a
    constant reference map are excluded and noted.
    """
    manifests = {_scenario_key(k): v for k, v in manifests.items()}
    if "S1" not in manifests or not any(s in manifests for s in EU_SCENARIOS):
        raise UQError("MISSING_SCENARIO", f"need S1 and one of {EU_SCENARIOS}; got {sorted(manifests)}")
    seeds = tuple(seeds) if seeds is not None else grid.seeds
    rows, notes = [], []

    s1 = _materialize(c for c in manifests["S1"] if c.role is Role.TEST and c.split is Split.IID)
    s1_prep = _prepare(s1)
    refs = []  # (case index, reference map)
    for i, c in enumerate(s1):
        if c.raters is None or c.raters.n_raters < 2:
            notes.append(f"S1/{c.case_id}: fewer than two raters, excluded from NCC")
            continue
        ref = rater_variance_map(c.raters)
        if float(ref.data.max()) == float(ref.data.min()):
            notes.append(f"S1/{c.case_id}: ZERO_VARIANCE reference, excluded from NCC")
            continue
        refs.append((i, ref))

    for family in grid.families:
        for seed in seeds:
            cfg = grid.simulator(family, seed)
            maps = _case_maps(_stacks(s1_prep, cfg), family)
            for measure, ctype in grid.measures(family):
                vals = []
                for i, ref in refs:
                    v, flag = ncc(maps[i][measure], ref, with_flag=True)
                    if flag:
                        notes.append(f"S1/{s1[i].case_id}: {family.value}/{measure.value} constant map, NCC=0")
                    vals.append(v)
                if vals:
                    rows.append(_row("S1", Task.NCC, Split.IID, family, measure, ctype, NONE, seed, np.mean(vals)))

    for scen in EU_SCENARIOS:
        if scen not in manifests:
            continue
        cases = list(manifests[scen])
        test = _materialize(c for c in cases if c.role is Role.TEST)
        labels = np.array([c.split is Split.OOD for c in test], dtype=int)
        if labels.min() == labels.max():
            raise UQError("MISSING_SPLIT", f"{scen}: test set needs both i.i.d. and OoD cases")
        val = _materialize(_val_pick(cases, n_val))
        test_prep, val_prep = _prepare(test), _prepare(val)
        for family in grid.families:
            for seed in seeds:
                cfg = grid.simulator(family, seed)
                maps = _case_maps(_stacks(test_prep, cfg), family)
                thresholds = None
                if val:
                    vstacks = _stacks(val_prep, cfg)
                    vmaps = _case_maps(vstacks, family)
                    vlabels = [mean_prediction(s)[1] for s in vstacks]
                    thresholds = _thresholds(vmaps, vlabels, [m for m, _ in grid.measures(family)])
                for measure, ctype in grid.measures(family):
                    for spec in grid.aggregations:
                        scores = _scores(maps, measure, spec, thresholds)
                        rows.append(_row(scen, Task.AUROC, "ALL", family, measure, ctype, spec.key, seed,
                                         auroc(scores, labels)))
    return StudyReport(tuple(rows), tuple(notes))


# ----------------------------------------------------------- downstream tasks


def al_query_selection(pool_scores: Sequence) -> list:
    """Case ids of the most uncertain half of the pool (ceil), ties by id."""
    if len(pool_scores) == 0:
        raise UQError("EMPTY_POOL", "no pool cases")
    ranked = sorted(pool_scores, key=lambda cs: (-float(cs[1]), str(cs[0])))
    k = math.ceil(len(ranked) / 2)
    return [cid for cid, _ in ranked[:k]]


def _pixel_correct(stack, raters) -> tuple:
    """Predicted labels and per-pixel correctness against the rater majority vote."""
    _, labels = mean_prediction(stack)
    return labels, labels == majority_vote(raters)


def _split_cases(cases: Sequence[CaseRecord]) -> dict:
    out = {"VAL": [], "TEST_IID": [], "TEST_OOD": [], "POOL": []}
    for i, c in enumerate(cases):
        if c.role is Role.VAL:
            out["VAL"].append(i)
        elif c.role is Role.TEST:
            out["TEST_OOD" if c.split is Split.OOD else "TEST_IID"].append(i)
        elif c.role is Role.POOL:
            out["POOL"].append(i)
    return out


def run_downstream_eval(manifest: Sequence, grid: StudyGrid, seeds: Optional[Sequence[int]] = None, *,
                        dataset: str = "TOY", simulate: bool = True, n_bins: int = 10,
                        ged_enumerate_cap: int = 32, ged_draws: int = 100_000,
                        platt_max_pixels: int = 1_000_000, al_dice: Optional[Mapping] = None,
                        oracle_fd: bool = False) -> StudyReport:
    """OoD detection, failure detection, AL query quality, calibration and ambiguity modeling.

    With ``simulate=False`` the stored stacks of every case are evaluated
    (one model; ``grid.families`` must then name that single family).
    ``al_dice`` optionally maps ``(family, measure, aggregation)`` to the four
    Dice values ``(t1_method, t2_method, t1_random, t2_random)`` of an external
    retraining run. ``oracle_fd`` replaces confidences by negative risks.
    """
    cases = _materialize(manifest)
    parts = _split_cases(cases)
    missing = [k for k in ("VAL", "TEST_IID", "TEST_OOD", "POOL") if not parts[k]]
    if missing:
        raise UQError("MISSING_SPLIT", f"manifest lacks {', '.join(missing)} cases")
    test_idx = parts["TEST_IID"] + parts["TEST_OOD"]
    if not any(cases[i].raters is not None and cases[i].raters.n_raters >= 2 for i in test_idx):
        raise UQError("MISSING_SPLIT", "ambiguity modeling needs test cases with at least two raters")
    for i in test_idx + parts["VAL"]:
        if cases[i].raters is None:
            raise UQError("MISSING_SPLIT", f"case {cases[i].case_id} has no reference masks")
    if not simulate and len(grid.families) != 1:
        raise UQError("CONFIG_INVALID", "stored stacks belong to exactly one model family")
    seeds = tuple(seeds) if seeds is not None else grid.seeds
    prepared = _prepare(cases) if simulate else [_Prepared(c, None) for c in cases]
    ood_label = np.array([cases[i].split is Split.OOD for i in test_idx], dtype=int)
    rows, notes = [], []

    def add(task, split, family, measure, ctype, agg, seed, value):
        rows.append(_row(dataset, task, split, family, measure, ctype, agg, seed, value))

    for family in grid.families:
        measures = grid.measures(family)
        for seed in seeds:
            cfg = grid.simulator(family, seed) if simulate else None
            stacks = _stacks(prepared, cfg)
            maps = {i: m for i, m in zip(range(len(cases)), _case_maps(stacks, family))}
            pix = {i: _pixel_correct(stacks[i], cases[i].raters) for i in parts["VAL"] + test_idx}
            risk = {i: 1.0 - mean_rater_dice(stacks[i], cases[i].raters) for i in test_idx}
            val_maps = [maps[i] for i in parts["VAL"]]
            thresholds = _thresholds(val_maps, [pix[i][0] for i in parts["VAL"]], [m for m, _ in measures])

            for split, idx in (("IID", parts["TEST_IID"]), ("OOD", parts["TEST_OOD"])):
                add(Task.DICE, split, family, NONE, NONE, NONE, seed, np.mean([1.0 - risk[i] for i in idx]))
                geds = []
                for i in idx:
                    geds.append(ged(sample_masks(stacks[i]), list(cases[i].raters.masks),
                                    enumerate_cap=ged_enumerate_cap, n_draws=ged_draws, seed=seed))
                add(Task.GED, split, family, NONE, NONE, NONE, seed, np.mean(geds))

            for measure, ctype in measures:
                for spec in grid.aggregations:
                    test_scores = _scores([maps[i] for i in test_idx], measure, spec, thresholds)
                    add(Task.AUROC, "ALL", family, measure, ctype, spec.key, seed, auroc(test_scores, ood_label))
                    for split, idx in (("IID", parts["TEST_IID"]), ("OOD", parts["TEST_OOD"])):
                        r = np.array([risk[i] for i in idx])
                        conf = -r if oracle_fd else -_scores([maps[i] for i in idx], measure, spec, thresholds)
                        add(Task.AURC, split, family, measure, ctype, spec.key, seed, aurc(conf, r))
                        add(Task.E_AURC, split, family, measure, ctype, spec.key, seed, e_aurc(conf, r))
                    pool = parts["POOL"]
                    pool_scores = _scores([maps[i] for i in pool], measure, spec, thresholds)
                    chosen = set(al_query_selection([(cases[i].case_id, s) for i, s in zip(pool, pool_scores)]))
                    frac = np.mean([cases[i].split is Split.OOD for i in pool if cases[i].case_id in chosen])
                    add(Task.AL_QUERY, "POOL", family, measure, ctype, spec.key, seed, frac)
                    key = (family.value, measure.value, spec.key)
                    if al_dice and key in al_dice:
                        add(Task.AL_IMPROVEMENT, "OOD", family, measure, ctype, spec.key, seed,
                            al_improvement(*al_dice[key]))

                # calibration: uncertainty -> P(correct) fitted on validation pixels
                u = np.concatenate([maps[i][measure].data.ravel() for i in parts["VAL"]])
                ok = np.concatenate([pix[i][1].ravel() for i in parts["VAL"]])
                if u.size > platt_max_pixels:
                    sub = np.random.default_rng(seed).choice(u.size, platt_max_pixels, replace=False)
                    u, ok = u[sub], ok[sub]
                try:
                    platt = platt_scale(u, ok)
                except UQError as e:
                    notes.append(f"{dataset}/{family.value}/{measure.value}/seed{seed}: Platt scaling skipped ({e.code})")
                    platt = None
                if platt is not None and platt.capped:
                    notes.append(f"{dataset}/{family.value}/{measure.value}/seed{seed}: CONVERGENCE_CAPPED")
                for split, idx in (("IID", parts["TEST_IID"]), ("OOD", parts["TEST_OOD"])):
                    if platt is not None:
                        conf = np.concatenate([platt(maps[i][measure].data).ravel() for i in idx])
                        ok_t = np.concatenate([pix[i][1].ravel() for i in idx])
                        add(Task.ACE, split, family, measure, ctype, NONE, seed, ace(conf, ok_t, n_bins))
                    vals = []
                    for i in idx:
                        if cases[i].raters.n_raters < 2:
                            continue
                        ref = rater_variance_map(cases[i].raters)
                        v, flag = ncc(maps[i][measure], ref, with_flag=True)
                        if flag:
                            notes.append(f"{dataset}/{cases[i].case_id}: ZERO_VARIANCE, excluded from NCC")
                            continue
                        vals.append(v)
                    if vals:
                        add(Task.NCC, split, family, measure, ctype, NONE, seed, np.mean(vals))
                    elif seed == seeds[0] and measure == measures[0][0] and family == grid.families[0]:
                        notes.append(f"{dataset}/{split}: no multi-rater cases with rater disagreement, NCC omitted")
    return StudyReport(tuple(rows), tuple(notes))


# ---------------------------------------------------- component improvements


@dataclass(frozen=True)
class Improvement:
    value: str
    improvement: float
    sd: float
    n_cells: int


_COMPONENT_FIELD = {
    Component.FAMILY: "family",
    Component.MEASURE_TYPE: "claimed_type",
    Component.AGGREGATION: "aggregation",
}


def component_improvement_aggregate(report: StudyReport, component, task, *, dataset: Optional[str] = None,
                                    split: Optional[str] = None) -> dict:
    """Per value of ``component``: mean over all other grid cells minus the grand mean.

    Seeds are averaged within each cell first; the remaining dimensions are
    flattened, so ``sd`` is the population sd across those cells. Lower-is-
    better metrics are negated so a positive improvement is always better.
    Measure types unsuited to the task are dropped beforehand.
    """
    component = Component(component)
    task = Task(task)
    rows = [r for r in report.rows if r.task == task.value
            and (dataset is None or r.dataset == dataset) and (split is None or r.split == split)]
    excluded = EXCLUDED_TYPES.get(task, frozenset())
    rows = [r for r in rows if r.claimed_type not in excluded]
    if not rows:
        raise UQError("INCOMPLETE_GRID", f"no rows for task {task.value}")
    seeds_per_cell: dict = {}
    for r in rows:
        seeds_per_cell.setdefault(r.cell, {})[r.seed] = r.value
    seed_sets = {frozenset(v) for v in seeds_per_cell.values()}
    if len(seed_sets) != 1:
        raise UQError("INCOMPLETE_GRID", "grid cells were evaluated on different seeds")
    sign = -1.0 if task in LOWER_IS_BETTER else 1.0
    cell_value = {cell: sign * float(np.mean(list(v.values()))) for cell, v in sorted(seeds_per_cell.items())}
    grand = float(np.mean(list(cell_value.values())))
    pos = ROW_FIELDS.index(_COMPONENT_FIELD[component])
    groups: dict = {}
    for cell, v in cell_value.items():
        groups.setdefault(cell[pos], []).append(v)
    return {k: Improvement(k, float(np.mean(v)) - grand, float(np.std(v)), len(v)) for k, v in sorted(groups.items())}
