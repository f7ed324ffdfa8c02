"""Command-line pipelines: every subcommand reads from disk, writes to disk,
prints a JSON summary on stdout and leaves a CSV table next to its outputs.

Exit codes: 0 success, 2 validation failure, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import io as sio
from .aggregation import AggregationSpec, Strategy, aggregate, compute_threshold
from .core import ModelFamily, Role, UQError, mean_prediction
from .measures import compute_measures
from .study import (
    Component,
    Task,
    component_improvement_aggregate,
    run_downstream_eval,
    run_separation_study,
)
from .simulate import simulate_case
from .toygen import build_downstream_manifest, build_scenario

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 2, 3
DOWNSTREAM = "DOWNSTREAM"


def _config(args) -> sio.RunConfig:
    cfg = sio.read_config(args.config) if getattr(args, "config", None) else sio.RunConfig()
    if getattr(args, "volume_edge", None) is not None:
        cfg = replace(cfg, volume_edge=args.volume_edge)
    return cfg


def _table(rows: Sequence[dict], fields: Sequence[str]) -> str:
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (sio.fmt(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _fresh_dir(path) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"{out} exists and is not empty; refusing to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------- subcommands


def cmd_toygen(args) -> dict:
    cfg = _config(args)
    seed = cfg.master_seed if args.seed is None else args.seed
    scen = args.scenario.upper()
    if scen == DOWNSTREAM:
        stubs = build_downstream_manifest(seed, cfg.volume_edge)
    else:
        stubs = build_scenario(scen, seed, cfg.volume_edge)
    out = _fresh_dir(args.out)
    entries = [sio.save_case(out, s.materialize()) for s in stubs]
    sio.write_manifest(out / "manifest.json", sio.Manifest(f"TOY_{scen}", tuple(entries)))
    counts: dict = {}
    for e in entries:
        counts[(e.role, e.split)] = counts.get((e.role, e.split), 0) + 1
    rows = [dict(role=r, split=s, n_cases=n) for (r, s), n in sorted(counts.items())]
    (out / "cases.csv").write_text(_table(rows, ("role", "split", "n_cases")))
    return {"manifest": str(out / "manifest.json"), "n_cases": len(entries), "scenario": scen, "seed": seed,
            "counts": rows}


def cmd_simulate(args) -> dict:
    cfg = _config(args)
    family = ModelFamily(args.family.upper())
    seed = cfg.seeds[0] if args.seed is None else args.seed
    sim = cfg.grid((seed,)).simulator(family, seed)
    src = sio.read_manifest(args.manifest)
    out = _fresh_dir(args.out)
    entries, rows = [], []
    for e in src.cases:
        case = sio.load_case(args.manifest, e)
        case = replace(case, stack=simulate_case(case, sim))
        entries.append(sio.save_case(out, case))
        rows.append(dict(case_id=case.case_id, split=e.split, role=e.role, n_samples=case.stack.n_samples,
                         n_classes=case.stack.n_classes))
    sio.write_manifest(out / "manifest.json", sio.Manifest(src.dataset, tuple(entries)))
    (out / "simulator.json").write_text(json.dumps(sim.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "cases.csv").write_text(_table(rows, ("case_id", "split", "role", "n_samples", "n_classes")))
    return {"manifest": str(out / "manifest.json"), "n_cases": len(entries), "family": family.value,
            "seed": seed}


def _stacked_cases(manifest_path):
    cases = sio.load_cases(manifest_path)
    missing = [c.case_id for c in cases if c.stack is None]
    if missing:
        raise UQError("MISSING_STACK", f"{len(missing)} cases have no probability stack, e.g. {missing[0]}")
    return cases


def cmd_uncertainty(args) -> dict:
    family = ModelFamily(args.family.upper())
    cases = _stacked_cases(args.manifest)
    out = _fresh_dir(args.out)
    rows = []
    for c in cases:
        for measure, umap in sorted(compute_measures(c.stack, family).items(), key=lambda kv: kv[0].value):
            name = f"{c.case_id}_{measure.value}"
            (out / "maps").mkdir(exist_ok=True)
            sio.write_array(out / "maps" / f"{name}.npy", umap.data)
            if args.heatmaps:
                sio.export_heatmap(umap, family, out / "heatmaps", name)
            rows.append(dict(case_id=c.case_id, measure=measure.value, claimed_type=umap.claimed_type.value,
                             mean=float(umap.data.mean()), max=float(umap.data.max())))
    (out / "uncertainty.csv").write_text(_table(rows, ("case_id", "measure", "claimed_type", "mean", "max")))
    return {"out": str(out), "n_cases": len(cases), "n_maps": len(rows), "family": family.value}


def cmd_aggregate(args) -> dict:
    family = ModelFamily(args.family.upper())
    spec = AggregationSpec(Strategy(args.strategy.upper()), args.window_edge)
    cases = _stacked_cases(args.manifest)
    maps = [compute_measures(c.stack, family) for c in cases]
    measures = sorted(maps[0], key=lambda m: m.value) if maps else []
    thresholds = {}
    if spec.strategy is Strategy.THRESHOLD_MEAN:
        val = [i for i, c in enumerate(cases) if c.role is Role.VAL]
        if not val:
            raise UQError("MISSING_SPLIT", "threshold-mean needs VAL cases to fit the threshold")
        labels = [mean_prediction(cases[i].stack)[1] for i in val]
        thresholds = {m: compute_threshold([maps[i][m] for i in val], labels) for m in measures}
    rows = []
    for c, mp in zip(cases, maps):
        for m in measures:
            s = spec.with_threshold(thresholds[m]) if m in thresholds else spec
            rows.append(dict(case_id=c.case_id, split=c.split.value, role=c.role.value, measure=m.value,
                             aggregation=spec.key, score=float(aggregate(mp[m], s))))
    out = _fresh_dir(args.out)
    (out / "scores.csv").write_text(_table(rows, ("case_id", "split", "role", "measure", "aggregation", "score")))
    return {"out": str(out), "n_scores": len(rows), "aggregation": spec.key,
            "thresholds": {m.value: float(t) for m, t in sorted(thresholds.items(), key=lambda kv: kv[0].value)},
            "warnings": spec.warning_tags(single_object=not args.multi_object)}


def _run_study(args, cfg: sio.RunConfig, fn, label: str) -> dict:
    seeds = (args.seed,) if args.seed is not None else cfg.seeds
    report = fn(seeds)
    root = Path(args.out) if args.out else Path(cfg.output_dir)
    run = sio.new_run_dir(root)
    (run / "config.json").write_text(cfg.dumps())
    paths = sio.render_report(report, run, extra={"study": label, "seeds": list(seeds)})
    return {"run_dir": str(run), "study": label, "n_rows": len(report.rows), "n_notes": len(report.notes),
            "files": paths}


def cmd_study_separation(args) -> dict:
    cfg = _config(args)
    manifests = {s: build_scenario(s, cfg.master_seed, cfg.volume_edge) for s in cfg.scenarios if s != DOWNSTREAM}
    return _run_study(args, cfg, lambda seeds: run_separation_study(manifests, cfg.grid(seeds), n_val=cfg.n_val),
                      "separation")


def cmd_study_downstream(args) -> dict:
    cfg = _config(args)
    if args.manifest:
        cases = sio.load_cases(args.manifest)
        dataset = sio.read_manifest(args.manifest).dataset or "DATASET"
    else:
        cases = build_downstream_manifest(cfg.master_seed, cfg.volume_edge)
        dataset = "TOY"
    simulate = not args.stored_stacks

    def run(seeds):
        return run_downstream_eval(cases, cfg.grid(seeds), dataset=dataset, simulate=simulate, n_bins=cfg.n_bins,
                                   ged_enumerate_cap=cfg.ged_enumerate_cap, ged_draws=cfg.ged_draws,
                                   platt_max_pixels=cfg.platt_max_pixels)
    return _run_study(args, cfg, run, "downstream")


def cmd_evaluate(args) -> dict:
    """Downstream evaluation of the stored stacks of one model family."""
    cfg = _config(args)
    family = ModelFamily(args.family.upper())
    cases = _stacked_cases(args.manifest)
    dataset = sio.read_manifest(args.manifest).dataset or "DATASET"
    cfg = replace(cfg, families=(family.value,))

    def run(seeds):
        return run_downstream_eval(cases, cfg.grid(seeds[:1]), dataset=dataset, simulate=False, n_bins=cfg.n_bins,
                                   ged_enumerate_cap=cfg.ged_enumerate_cap, ged_draws=cfg.ged_draws,
                                   platt_max_pixels=cfg.platt_max_pixels)
    return _run_study(args, cfg, run, "evaluate")


def cmd_report(args) -> dict:
    src = Path(args.input)
    notes = ()
    sidecar = src.with_suffix(".json")
    if sidecar.is_file():
        notes = tuple(json.loads(sidecar.read_text()).get("notes", ()))
    report = sio.parse_report_csv(src.read_text(), notes)
    run = sio.new_run_dir(args.out)
    paths = sio.render_report(report, run)
    rows = []
    tasks = sorted({r.task for r in report.rows})
    for task in tasks:
        for comp in Component:
            try:
                imp = component_improvement_aggregate(report, comp, Task(task))
            except UQError as e:
                if e.code != "INCOMPLETE_GRID":
                    raise
                continue
            for v in imp.values():
                rows.append(dict(task=task, component=comp.value, value=v.value, improvement=v.improvement,
                                 sd=v.sd, n_cells=v.n_cells))
    (run / "components.csv").write_text(_table(rows, ("task", "component", "value", "improvement", "sd",
                                                       "n_cells")))
    paths["components_csv"] = str(run / "components.csv")
    return {"run_dir": str(run), "n_rows": len(report.rows), "files": paths}


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seguq", description="Uncertainty measures, aggregation and evaluation for "
                                                          "segmentation")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True):
        if config:
            sp.add_argument("--config", help="run config (JSON)")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides the config seed")

    sp = sub.add_parser("toygen", help="generate a toy scenario")
    common(sp)
    sp.add_argument("--scenario", required=True, help="S1, S2, S3A, S3B or DOWNSTREAM")
    sp.add_argument("--volume-edge", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_toygen)

    sp = sub.add_parser("simulate", help="attach simulated probability stacks to a manifest")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--family", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("uncertainty", help="compute uncertainty maps")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--family", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--heatmaps", action="store_true", help="also export normalized heatmaps")
    sp.set_defaults(fn=cmd_uncertainty)

    sp = sub.add_parser("aggregate", help="image-level scores from uncertainty maps")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--family", required=True)
    sp.add_argument("--strategy", required=True, help="IMAGE_SUM, PATCH_MAX or THRESHOLD_MEAN")
    sp.add_argument("--window-edge", type=int, default=10)
    sp.add_argument("--multi-object", action="store_true", help="cases hold several structures")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_aggregate)

    sp = sub.add_parser("evaluate", help="downstream tasks on stored stacks")
    common(sp)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--family", required=True)
    sp.add_argument("--out", help="root for the run directory")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("study", help="grid studies")
    ssub = sp.add_subparsers(dest="study", required=True)
    s1 = ssub.add_parser("separation", help="AU/EU separation on the toy scenarios")
    common(s1)
    s1.add_argument("--volume-edge", type=int)
    s1.add_argument("--out", help="root for the run directory")
    s1.set_defaults(fn=cmd_study_separation)
    s2 = ssub.add_parser("downstream", help="downstream tasks over the grid")
    common(s2)
    s2.add_argument("--manifest", help="cases to evaluate (default: generated toy set)")
    s2.add_argument("--stored-stacks", action="store_true", help="evaluate the manifest's stacks, do not simulate")
    s2.add_argument("--volume-edge", type=int)
    s2.add_argument("--out", help="root for the run directory")
    s2.set_defaults(fn=cmd_study_downstream)

    sp = sub.add_parser("report", help="re-render a report CSV and add component improvements")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True, help="root for the run directory")
    sp.set_defaults(fn=cmd_report)
    return p


def _diagnose(kind: str, code: str, message: str, index=None) -> None:
    d = {"status": "error", "kind": kind, "code": code, "message": message}
    if index is not None:
        d["index"] = list(index)
    print(json.dumps(d, sort_keys=True), file=sys.stderr)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        summary = args.fn(args)
    except sio.ArrayFormatError as e:
        _diagnose("io", e.code, str(e))
        return EXIT_IO
    except UQError as e:
        _diagnose("validation", e.code, str(e), e.index)
        return EXIT_VALIDATION
    except ValueError as e:
        _diagnose("validation", "INVALID_ARGUMENT", str(e))
        return EXIT_VALIDATION
    except OSError as e:
        _diagnose("io", type(e).__name__.upper(), str(e))
        return EXIT_IO
    print(json.dumps({"status": "ok", **summary}, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
