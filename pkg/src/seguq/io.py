"""On-disk formats: NPY arrays, JSON manifests and run configs, CSV/JSON reports."""
from __future__ import annotations

import ast
import csv
import io as _io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .aggregation import AggregationSpec, Strategy
from .core import CaseRecord, ModelFamily, ProbabilityStack, RaterSet, Role, Split, UncertaintyMap, UQError
from .simulate import SimulatorConfig
from .study import ROW_FIELDS, ReportRow, StudyGrid, StudyReport

MANIFEST_VERSION = 1
CONFIG_VERSION = 1
NPY_MAGIC = b"\x93NUMPY"
ALLOWED_DTYPES = {np.dtype("<f8"): "float64", np.dtype("uint8"): "uint8"}

# display bounds for qualitative heatmaps: single-prediction maps top out near
# 1 - 1/C = 0.5 for two classes, sampled entropies are shown up to 0.7
HEATMAP_BOUND_DETERMINISTIC = 0.5
HEATMAP_BOUND_SAMPLING = 0.7


class ArrayFormatError(UQError):
    """Malformed or unsupported NPY file (an I/O failure, not a validation one)."""


# ----------------------------------------------------------------------- NPY


def write_array(path, array: np.ndarray) -> None:
    """Write NPY v1.0, little-endian, C-order. Only float64 and uint8 are accepted."""
    a = np.asarray(array)
    if a.dtype == bool:
        a = a.astype(np.uint8)
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder not in ("|", "=") else a.dtype
    if np.dtype(dt).str not in ("<f8", "|u1"):
        raise ArrayFormatError("DTYPE_UNSUPPORTED", f"{a.dtype}; use float64 for fields, uint8 for masks")
    a = np.require(a.astype(dt, copy=False), requirements="C")
    with open(path, "wb") as f:
        np.lib.format.write_array(f, a, version=(1, 0), allow_pickle=False)


def read_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:6] != NPY_MAGIC:
        raise ArrayFormatError("MAGIC_MISMATCH", f"{path}: not an NPY file")
    if len(raw) < 10:
        raise ArrayFormatError("TRUNCATED_FILE", f"{path}: header cut short")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise ArrayFormatError("DTYPE_UNSUPPORTED", f"{path}: NPY version {major}.{minor}, expected 1.0")
    hlen = int.from_bytes(raw[8:10], "little")
    if len(raw) < 10 + hlen:
        raise ArrayFormatError("TRUNCATED_FILE", f"{path}: header cut short")
    try:
        header = ast.literal_eval(raw[10:10 + hlen].decode("latin1"))
        descr, fortran, shape = header["descr"], header["fortran_order"], tuple(header["shape"])
        dtype = np.dtype(descr)
    except (ValueError, SyntaxError, KeyError, TypeError) as e:
        raise ArrayFormatError("MAGIC_MISMATCH", f"{path}: unreadable header ({e})") from None
    if fortran:
        raise ArrayFormatError("DTYPE_UNSUPPORTED", f"{path}: Fortran-order arrays are not supported")
    if dtype.str not in ("<f8", "|u1"):
        raise ArrayFormatError("DTYPE_UNSUPPORTED", f"{path}: dtype {dtype.str}")
    n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    body = raw[10 + hlen:]
    if len(body) < n:
        raise ArrayFormatError("TRUNCATED_FILE", f"{path}: expected {n} data bytes, found {len(body)}")
    return np.frombuffer(body[:n], dtype=dtype).reshape(shape).copy()


# ----------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    split: str
    role: str
    image: Optional[str] = None
    stack: Optional[str] = None
    raters: Optional[str] = None
    scenario_tags: tuple = ()


@dataclass(frozen=True)
class Manifest:
    dataset: str
    cases: tuple
    format_version: int = MANIFEST_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "dataset": self.dataset,
            "cases": [{k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(c).items()}
                      for c in self.cases],
        }


def write_manifest(path, manifest: Manifest) -> None:
    ids = [c.case_id for c in manifest.cases]
    if len(set(ids)) != len(ids):
        raise UQError("DUPLICATE_CASE_ID", "case ids must be unique")
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def read_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise UQError("MANIFEST_INVALID", f"{path}: {e}") from None
    if d.get("format_version") != MANIFEST_VERSION:
        raise UQError("MANIFEST_INVALID", f"{path}: unknown format_version {d.get('format_version')!r}")
    cases = []
    for c in d.get("cases", []):
        try:
            Split(c["split"]), Role(c["role"])
            entry = ManifestEntry(c["case_id"], c["split"], c["role"], c.get("image"), c.get("stack"),
                                  c.get("raters"), tuple(c.get("scenario_tags", ())))
        except (KeyError, ValueError) as e:
            raise UQError("MANIFEST_INVALID", f"{path}: bad case entry {c!r} ({e})") from None
        cases.append(entry)
    ids = [c.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise UQError("DUPLICATE_CASE_ID", f"{path}: case ids must be unique")
    if check_files:
        for c in cases:
            for rel in (c.image, c.stack, c.raters):
                if rel is not None and not (path.parent / rel).is_file():
                    raise FileNotFoundError(f"{path}: missing file {rel} for case {c.case_id}")
    return Manifest(d.get("dataset", ""), tuple(cases), d["format_version"])


def load_case(manifest_path, entry: ManifestEntry, with_image: bool = False) -> CaseRecord:
    base = Path(manifest_path).parent
    stack = ProbabilityStack.checked(read_array(base / entry.stack)) if entry.stack else None
    raters = RaterSet(read_array(base / entry.raters)) if entry.raters else None
    image = read_array(base / entry.image) if (with_image and entry.image) else None
    return CaseRecord(entry.case_id, entry.split, entry.role, stack, raters, image, entry.scenario_tags)


def load_cases(manifest_path, roles: Optional[Sequence[str]] = None, with_image: bool = False) -> list:
    m = read_manifest(manifest_path)
    return [load_case(manifest_path, e, with_image) for e in m.cases if roles is None or e.role in roles]


def save_case(out_dir, case: CaseRecord) -> ManifestEntry:
    """Write a case's arrays below ``out_dir`` and return its manifest entry (relative paths)."""
    out_dir = Path(out_dir)
    rel = {}
    for kind, arr in (("image", case.image), ("stack", case.stack.data if case.stack else None),
                      ("raters", case.raters.masks if case.raters else None)):
        if arr is None:
            continue
        (out_dir / kind).mkdir(parents=True, exist_ok=True)
        p = Path(kind) / f"{case.case_id}.npy"
        write_array(out_dir / p, arr)
        rel[kind] = p.as_posix()
    return ManifestEntry(case.case_id, case.split.value, case.role.value, rel.get("image"), rel.get("stack"),
                         rel.get("raters"), tuple(case.scenario_tags))


# ---------------------------------------------------------------- run config


@dataclass(frozen=True)
class RunConfig:
    families: tuple = ("DETERMINISTIC", "TTD", "ENSEMBLE", "TTA", "SSN")
    aggregations: tuple = ("PATCH_MAX", "THRESHOLD_MEAN")
    window_edge: int = 10
    seeds: tuple = (0, 1, 2)
    simulators: dict = field(default_factory=dict)
    scenarios: tuple = ("S1", "S2", "S3A", "S3B")
    master_seed: int = 0
    volume_edge: int = 48
    n_val: int = 10
    n_bins: int = 10
    ged_enumerate_cap: int = 32
    ged_draws: int = 100_000
    platt_max_pixels: int = 1_000_000
    output_dir: str = "runs"
    format_version: int = CONFIG_VERSION

    def __post_init__(self):
        for name in ("families", "aggregations", "seeds", "scenarios"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for f in self.families:
            ModelFamily(f)
        for a in self.aggregations:
            Strategy(a)
        for fam, sim in self.simulators.items():
            SimulatorConfig.from_dict({**sim, "family": fam})

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise UQError("CONFIG_INVALID", f"unknown config keys {sorted(unknown)}")
        if d.get("format_version", CONFIG_VERSION) != CONFIG_VERSION:
            raise UQError("CONFIG_INVALID", f"unknown format_version {d['format_version']!r}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, UQError):
                raise
            raise UQError("CONFIG_INVALID", str(e)) from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as e:
            raise UQError("CONFIG_INVALID", str(e)) from None

    def grid(self, seeds: Optional[Sequence[int]] = None) -> StudyGrid:
        sims = {fam: SimulatorConfig.from_dict({**sim, "family": fam}) for fam, sim in self.simulators.items()}
        return StudyGrid(
            families=self.families,
            aggregations=tuple(AggregationSpec(a, self.window_edge) for a in self.aggregations),
            seeds=tuple(seeds) if seeds is not None else self.seeds,
            simulators=sims,
        )


def read_config(path) -> RunConfig:
    return RunConfig.loads(Path(path).read_text())


# ------------------------------------------------------------------- reports


def fmt(v: float) -> str:
    return f"{v:.6g}"


def report_csv(report: StudyReport) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for r in sorted(report.rows):
        w.writerow([r.dataset, r.task, r.split, r.family, r.measure, r.claimed_type, r.aggregation, r.seed,
                    fmt(r.value)])
    return buf.getvalue()


def summary_csv(report: StudyReport) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = list(ROW_FIELDS[:-2]) + ["n_seeds", "mean", "sd"]
    w.writerow(head)
    for s in report.summary():
        w.writerow([s[k] if k not in ("mean", "sd") else fmt(s[k]) for k in head])
    return buf.getvalue()


def report_json(report: StudyReport, extra: Optional[dict] = None) -> str:
    d = {
        "rows": [{k: (fmt(getattr(r, k)) if k == "value" else getattr(r, k)) for k in ROW_FIELDS}
                 for r in sorted(report.rows)],
        "summary": [{k: (fmt(v) if k in ("mean", "sd") else v) for k, v in s.items()} for s in report.summary()],
        "notes": list(report.notes),
    }
    if extra:
        d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def parse_report_csv(text: str, notes: Sequence[str] = ()) -> StudyReport:
    rows = []
    reader = csv.DictReader(_io.StringIO(text))
    if reader.fieldnames is None:
        return StudyReport((), tuple(notes))
    if tuple(reader.fieldnames) != ROW_FIELDS:
        raise UQError("REPORT_INVALID", f"unexpected columns {reader.fieldnames}")
    for d in reader:
        rows.append(ReportRow(d["dataset"], d["task"], d["split"], d["family"], d["measure"], d["claimed_type"],
                              d["aggregation"], int(d["seed"]), float(d["value"])))
    return StudyReport(tuple(rows), tuple(notes))


def render_report(report: StudyReport, out_dir, *, stem: str = "report", extra: Optional[dict] = None) -> dict:
    """Write ``<stem>.csv`` (rows), ``<stem>_summary.csv`` and ``<stem>.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / f"{stem}.csv", "summary_csv": out / f"{stem}_summary.csv", "json": out / f"{stem}.json"}
    paths["csv"].write_text(report_csv(report))
    paths["summary_csv"].write_text(summary_csv(report))
    paths["json"].write_text(report_json(report, extra))
    return {k: str(v) for k, v in paths.items()}


def heatmap_bound(family: ModelFamily) -> float:
    return HEATMAP_BOUND_DETERMINISTIC if ModelFamily(family) is ModelFamily.DETERMINISTIC \
        else HEATMAP_BOUND_SAMPLING


def export_heatmap(umap: UncertaintyMap, family: ModelFamily, out_dir, name: str) -> dict:
    """Clip to the family's display bound, rescale to [0, 1] and write array + metadata."""
    bound = heatmap_bound(family)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_array(out / f"{name}.npy", np.clip(umap.data, 0.0, bound) / bound)
    meta = {"name": name, "family": ModelFamily(family).value, "measure": umap.measure.value,
            "claimed_type": umap.claimed_type.value, "normalization": {"min": 0.0, "max": bound}}
    (out / f"{name}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def new_run_dir(root) -> Path:
    """A fresh run directory; never reuses an existing one."""
    from datetime import datetime, timezone

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    for k in range(1000):
        p = root / (f"run-{stamp}" + (f"-{k}" if k else ""))
        try:
            p.mkdir()
            return p
        except FileExistsError:
            continue
    raise OSError(f"could not allocate a run directory under {root}")
