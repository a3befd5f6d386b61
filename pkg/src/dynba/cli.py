"""Command line entry point: simulate, run, eval and sweep."""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import io
from .classifier import LandmarkLabel
from .evaluation import (AssociationFailure, TooFewPoses, associate, classification_metrics, map_report,
                         run_metrics, trajectory_metric)
from .pipeline import MapPoint, PipelineConfig, config_hash, run_scenario
from .sim import (ConfigError, FrameObservations, GroundTruth, Scenario, config_from_dict,
                  generate_scenario, load_scenario)

log = logging.getLogger("dynba")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
MODES = {
    "idy": {},
    "baseline": {"classify": False, "candidate_residual": False},
}


def setup_logging():
    level = os.environ.get("DYNBA_LOG", "warn").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if level not in LOG_LEVELS:
        log.warning("unknown DYNBA_LOG level %r, using warn", level)


def _pipeline_flags(p: argparse.ArgumentParser):
    p.add_argument("--lambda-dy", type=float, default=PipelineConfig.lambda_dy)
    p.add_argument("--lambda-dy-c", type=float, default=PipelineConfig.lambda_dy_c)
    p.add_argument("--confirm-px", type=float, default=PipelineConfig.confirm_px)
    p.add_argument("--window", type=int, default=PipelineConfig.window)
    p.add_argument("--no-classify", action="store_true")
    p.add_argument("--no-candidate-residual", action="store_true")
    p.add_argument("--eq1b-approx", action="store_true",
                   help="use the lever-arm-free relative pose in the motion prior")
    p.add_argument("--triangulate-eliminated", action="store_true",
                   help="triangulate eliminated tracks into the map (for map comparisons)")


def pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(window=args.window, classify=not args.no_classify,
                          candidate_residual=not args.no_candidate_residual,
                          lambda_dy=args.lambda_dy, lambda_dy_c=args.lambda_dy_c,
                          confirm_px=args.confirm_px, eq1b_approx=args.eq1b_approx,
                          triangulate_eliminated=args.triangulate_eliminated).validate()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynba", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a scenario and write its streams")
    s.add_argument("--scenario", required=True, help="preset name or YAML path")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run the estimator and write artifacts")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="preset name or YAML path (simulated inline)")
    src.add_argument("--input", help="directory written by 'simulate'")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", required=True)
    _pipeline_flags(r)

    e = sub.add_parser("eval", help="recompute metrics from a run directory")
    e.add_argument("run_dir")
    e.add_argument("--gt", help="ground-truth directory (default: the run directory)")
    e.add_argument("--out", help="write metrics JSON here instead of stdout")

    w = sub.add_parser("sweep", help="run a grid of scenarios, seeds, modes and parameters")
    w.add_argument("--scenario", action="append", default=[], help="repeatable")
    w.add_argument("--seed", type=int, nargs="*", default=None)
    w.add_argument("--mode", action="append", choices=sorted(MODES), default=None)
    w.add_argument("--grid", action="append", default=[],
                   help="PARAM=v1,v2,... over pipeline fields, repeatable")
    w.add_argument("--out", required=True)
    w.add_argument("--jobs", type=int, default=1)
    _pipeline_flags(w)
    return ap


# -- simulate ------------------------------------------------------------

def _load(name_or_path, seed):
    cfg = load_scenario(name_or_path)
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def write_scenario(scenario: Scenario, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.yaml").write_text(yaml.safe_dump(scenario.config.to_dict(), sort_keys=True))
    io.write_imu_csv(out / "imu.csv", scenario.imu)
    io.write_tracks_csv(out / "tracks.csv", scenario.frames)
    io.write_tum(out / "groundtruth.txt", scenario.truth.frames)
    io.write_states_csv(out / "states.csv", scenario.truth.frames)
    io.write_labels_csv(out / "labels.csv", scenario.truth.labels)


def read_scenario_dir(path: Path) -> Scenario:
    """Scenario from 'simulate' output; tracks are replayed open loop."""
    cfg_file = path / "scenario.yaml"
    if not cfg_file.exists():
        raise FileNotFoundError(f"scenario file not found: {cfg_file}")
    cfg = config_from_dict(yaml.safe_load(cfg_file.read_text()))
    imu = io.read_imu_csv(path / "imu.csv")
    tracks = io.read_tracks_csv(path / "tracks.csv")
    states = io.read_states_csv(path / "states.csv")
    labels = io.read_labels_csv(path / "labels.csv")
    frames = []
    for s in states:
        ids, pix = tracks.get(s.frame_id, (np.zeros(0, np.int64), np.zeros((0, 2))))
        frames.append(FrameObservations(s.frame_id, s.timestamp, ids, pix))
    if len(imu) != (len(frames) - 1) * cfg.imu_per_frame + 1:
        raise ConfigError(f"{path / 'imu.csv'}: {len(imu)} samples do not span {len(frames)} frames")
    return Scenario(cfg, imu, frames, GroundTruth(states, labels, None), [])


def cmd_simulate(args) -> int:
    sc = generate_scenario(_load(args.scenario, args.seed))
    write_scenario(sc, Path(args.out))
    log.info("wrote %d frames to %s", len(sc.frames), args.out)
    return EXIT_OK


# -- run -------------------------------------------------------------------

def execute(scenario: Scenario, pcfg: PipelineConfig, out: Path, feedback: bool = True) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    res = run_scenario(scenario, pcfg, feedback=feedback)
    h = config_hash(scenario.config.to_dict(), pcfg.to_dict())
    metrics = run_metrics(res, scenario.truth.frames, scenario.truth.labels, h, scenario.config.seed)
    io.write_tum(out / "trajectory.txt", list(res.trajectory.values()))
    io.write_labels_csv(out / "labels.csv", res.labels)
    io.write_map_csv(out / "map.csv", res.map_points)
    io.write_map_ply(out / "map.ply", res.map_points)
    io.write_debug_csv(out / "debug.csv", res.debug_rows)
    with (out / "cv_trace.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "cv_pre", "cv_post"])
        for f, a, b in res.cv_trace:
            w.writerow([f, io.FMT % a, io.FMT % b])
    io.write_tum(out / "groundtruth.txt", scenario.truth.frames)
    io.write_labels_csv(out / "gt_labels.csv", scenario.truth.labels)
    io.write_json(out / "config.json", {"scenario": scenario.config.to_dict(),
                                       "pipeline": pcfg.to_dict(), "config_hash": h})
    io.write_json(out / "metrics.json", metrics)
    return metrics


def cmd_run(args) -> int:
    pcfg = pipeline_config(args)
    if args.input:
        scenario = read_scenario_dir(Path(args.input))
        if args.seed is not None:
            log.warning("--seed ignored for pre-generated input")
        feedback = False
    else:
        scenario = generate_scenario(_load(args.scenario, args.seed))
        feedback = True
    metrics = execute(scenario, pcfg, Path(args.out), feedback)
    if metrics["diverged"]:
        print(f"solver diverged; artifacts written to {args.out}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


# -- eval ------------------------------------------------------------------

def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    gt_dir = Path(args.gt) if args.gt else run_dir
    t_est, p_est, _ = io.read_tum(run_dir / "trajectory.txt")
    t_gt, p_gt, _ = io.read_tum(gt_dir / "groundtruth.txt")
    ie, ig = associate(t_est, t_gt)
    ate = trajectory_metric(p_est[ie], p_gt[ig]).ate_rmse
    truth = io.read_labels_csv(gt_dir / ("gt_labels.csv" if (gt_dir / "gt_labels.csv").exists() else "labels.csv"))
    pred = io.read_labels_csv(run_dir / "labels.csv")
    cls = classification_metrics(pred, truth)
    points = []
    with (run_dir / "map.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            points.append(MapPoint(int(row["landmark_id"]), np.array([float(row[k]) for k in "xyz"]),
                                   LandmarkLabel(row["label"])))
    mp = map_report(points, truth)
    doc = {"ate_rmse_m": ate, "classifier": {"precision": cls.precision, "recall": cls.recall, "f1": cls.f1},
           "ghost_fraction": mp.ghost_fraction, "map_size": len(mp.ids)}
    if (run_dir / "metrics.json").exists():
        prev = io.read_json(run_dir / "metrics.json")
        for k in ("cv", "timing_ms", "config_hash", "seed"):
            if k in prev:
                doc[k] = prev[k]
    if args.out:
        io.write_json(args.out, doc)
    else:
        print(json.dumps(io._json_clean(doc), indent=2, sort_keys=True))
    return EXIT_OK


# -- sweep -----------------------------------------------------------------

def _parse_grid(items) -> dict:
    grid = {}
    fields = PipelineConfig().to_dict()
    for it in items:
        if "=" not in it:
            raise ConfigError(f"--grid {it!r}: expected PARAM=v1,v2")
        key, vals = it.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in fields:
            raise ConfigError(f"--grid {key}: unknown pipeline field")
        typ = type(fields[key])
        conv = (lambda s: s.lower() in ("1", "true", "yes")) if typ is bool else typ
        grid[key] = [conv(v) for v in vals.split(",") if v.strip()]
    return grid


def _cell_name(scn, seed, mode, params) -> str:
    extra = "".join(f"_{k}={v}" for k, v in sorted(params.items()))
    return f"{Path(scn).stem}_s{seed}_{mode}{extra}"


def _run_cell(job):
    scn, seed, mode, params, base, out = job
    try:
        pcfg = PipelineConfig(**{**base, **MODES[mode], **params}).validate()
        m = execute(generate_scenario(_load(scn, seed)), pcfg, Path(out))
        return {"ok": True, "metrics": m}
    except Exception as exc:   # recorded per cell, the sweep continues
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


AGG_FIELDS = ["cell", "scenario", "seed", "mode", "params", "status", "ate_rmse_m", "precision",
              "recall", "f1", "ghost_fraction", "cv_pre_mean", "cv_post_mean",
              "classify_median_ms", "optimize_median_ms", "config_hash"]


def cmd_sweep(args) -> int:
    grid = _parse_grid(args.grid)
    seeds = args.seed if args.seed is not None else [0]
    modes = args.mode or ["idy", "baseline"]
    combos = [dict(zip(grid, vals)) for vals in itertools.product(*grid.values())] if grid else [{}]
    cells = list(itertools.product(args.scenario, seeds, modes, combos))
    if not cells or any(not v for v in grid.values()):
        print("sweep grid is empty", file=sys.stderr)
        return EXIT_CONFIG
    for scn in args.scenario:
        _load(scn, None)    # fail fast on a bad scenario
    base = pipeline_config(args).to_dict()
    out = Path(args.out)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    jobs = [(scn, seed, mode, params, base, str(out / "cells" / _cell_name(scn, seed, mode, params)))
            for scn, seed, mode, params in cells]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]

    rows = []
    for (scn, seed, mode, params, _, path), res in zip(jobs, results):
        row = {"cell": Path(path).name, "scenario": Path(scn).stem, "seed": seed, "mode": mode,
               "params": ";".join(f"{k}={v}" for k, v in sorted(params.items()))}
        if res["ok"]:
            m = res["metrics"]
            row.update(status="diverged" if m["diverged"] else "ok", ate_rmse_m=m["ate_rmse_m"],
                       precision=m["classifier"]["precision"], recall=m["classifier"]["recall"],
                       f1=m["classifier"]["f1"], ghost_fraction=m["ghost_fraction"],
                       cv_pre_mean=m["cv"]["pre_mean"], cv_post_mean=m["cv"]["post_mean"],
                       classify_median_ms=m["timing_ms"]["classify_median"],
                       optimize_median_ms=m["timing_ms"]["optimize_median"], config_hash=m["config_hash"])
        else:
            row["status"] = "error: " + res["error"]
            log.error("cell %s failed: %s", row["cell"], res["error"])
        rows.append(row)
    with (out / "aggregate.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=AGG_FIELDS, restval="")
        w.writeheader()
        w.writerows(rows)
    _write_summary(out / "summary.csv", rows)
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_DIVERGED


def _finite_mean(values) -> float:
    v = np.array([np.nan if x is None else x for x in values], dtype=float)
    v = v[np.isfinite(v)]
    return float(v.mean()) if len(v) else float("nan")


def _write_summary(path: Path, rows):
    """Means over seeds per (scenario, mode, params)."""
    keys = ["ate_rmse_m", "precision", "recall", "f1", "ghost_fraction", "cv_pre_mean", "cv_post_mean",
            "classify_median_ms", "optimize_median_ms"]
    groups: dict = {}
    for r in rows:
        if r["status"] in ("ok", "diverged"):
            groups.setdefault((r["scenario"], r["mode"], r["params"]), []).append(r)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "mode", "params", "n"] + keys)
        for (scn, mode, params), rs in sorted(groups.items()):
            means = [_finite_mean([x[k] for x in rs]) for k in keys]
            w.writerow([scn, mode, params, len(rs)] + means)


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, io.FormatError, ValueError, AssociationFailure, TooFewPoses) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
