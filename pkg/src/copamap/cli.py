"""Command-line pipeline: synth -> ingest -> init -> train -> predict / eval / bench.

Every command writes its artifacts plus ``<command>.manifest.json`` holding
the config digest, seed, input and output digests, and timings. Exit codes:
0 on success, 2 on invalid input or artifacts, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .baselines import fit_fremen_cells, fit_gp_hom, fit_ml
from .bench import (
    Scenario, daily_departures, evaluate_model, model_rates, run_scenario, write_curve_csv, write_metrics_csv,
    write_report_csv,
)
from .config import MODEL_KINDS, PipelineConfig, load_config
from .data import (
    DetectionLog, GridSpec, OccupancyGrid, Trajectory, TrainingSet, load_detections, load_occupancy_map,
    load_trajectory, load_training_set, save_training_set,
)
from .errors import DataError, ModelFileError, NoPathError, NumericalError
from .fov import bin_observations, build_ground_truth
from .persist import file_digest, load_model, load_provenance, read_header, save_model
from .predict import CopaMapModel, write_field_csv, write_heatmaps
from .spectral import init_inducing_points, init_periodic_hyperparams
from .svgp import train, write_loss_trace
from .synth import DAY, make_dataset, write_dataset

log = logging.getLogger("copamap")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    return out


def _digests(paths: dict) -> dict:
    return {name: {"path": str(p), "sha256": file_digest(p)} for name, p in paths.items()}


def write_manifest(out: Path, command: str, cfg: PipelineConfig, inputs: dict, outputs: dict,
                   timings: dict, summary: Optional[dict] = None) -> Path:
    """``<command>.manifest.json``; inputs and outputs map a role to a file path."""
    doc = {"command": command, "version": __version__, "config_digest": cfg.digest(), "seed": cfg.seed,
           "inputs": _digests(inputs), "outputs": _digests(outputs),
           "timings": {k: round(float(v), 6) for k, v in timings.items()}, "summary": summary or {}}
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# pipeline stages (also usable from Python)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """A dataset directory resolved against the config."""

    log: DetectionLog
    occ: OccupancyGrid
    trajectory: Trajectory
    train_span: tuple
    test_span: Optional[tuple]
    fov_radius: float
    time_step: float
    goals: tuple
    files: dict


def load_dataset_dir(data_dir, cfg: PipelineConfig) -> Dataset:
    """Read ``detections.csv``, ``map.pgm``, ``trajectory.csv`` and the optional ``truth.json``."""
    d = Path(data_dir)
    files = {"detections": d / "detections.csv", "map": d / "map.pgm", "trajectory": d / "trajectory.csv"}
    for name, path in files.items():
        if not path.exists():
            raise DataError(f"dataset {d} lacks {path.name}")
    truth = {}
    if (d / "truth.json").exists():
        files["truth"] = d / "truth.json"
        truth = json.loads(files["truth"].read_text())
    dc = cfg.data

    def pick(key, fallback=None):
        value = getattr(dc, key)
        if value is None:
            value = truth.get(key, fallback)
        return value

    fov, step = pick("fov_radius"), pick("time_step", 1.0)
    if fov is None:
        raise DataError("data.fov_radius is auto but the dataset has no truth.json to take it from")
    log_ = load_detections(files["detections"], dc.downsample_hz)
    traj = load_trajectory(files["trajectory"], speed=dc.speed)
    train_span = pick("train_span")
    if train_span is None:
        train_span = (float(traj.t[0]), float(traj.t[-1]))
    test_span = pick("test_span")
    goals = cfg.bench.goals if cfg.bench.goals is not None else tuple(map(tuple, truth.get("goals", ())))
    return Dataset(log_, load_occupancy_map(files["map"]), traj, tuple(train_span),
                   tuple(test_span) if test_span else None, float(fov), float(step), goals, files)


def ingest(ds: Dataset, cfg: PipelineConfig) -> tuple[TrainingSet, Optional[TrainingSet]]:
    """Training rates over the train span and, with a test span, the fully observed ground truth."""
    grid = GridSpec.for_map(ds.occ, cfg.grid.r_s, cfg.grid.tau)
    t_a, t_b = ds.train_span
    traj = ds.trajectory
    keep = (traj.t >= t_a) & (traj.t <= t_b)
    if keep.sum() < 2:
        raise DataError("the trajectory has fewer than two poses inside the train span")
    ts = bin_observations(ds.log.between(t_a, t_b), Trajectory(traj.t[keep], traj.x1[keep], traj.x2[keep],
                                                               traj.speed), ds.occ, grid, ds.fov_radius,
                          ds.time_step)
    if ts.n == 0:
        raise DataError("the robot observed nothing in the train span")
    gt = None
    if ds.test_span is not None:
        gt = build_ground_truth(ds.log.between(*ds.test_span), grid, np.unique(ts.cell), ds.test_span)
    return ts, gt


def initialize(ts: TrainingSet, cfg: PipelineConfig):
    ic = cfg.init
    t0, t1 = ts.time_span
    periodic = init_periodic_hyperparams(ts, ic.periods(t1 - t0), ic.l, ic.psi_max, ic.sigma2_max, cfg.seed,
                                         ic.init_r_s, ic.init_tau, ic.folds)
    return periodic, init_inducing_points(ts, ic.alpha, cfg.seed)


def fit(kind: str, ts: TrainingSet, init, cfg: PipelineConfig):
    """Train one model kind; returns ``(model, loss_trace)``."""
    if kind == "copamap":
        res = train(ts, init, cfg.train)
        return CopaMapModel.from_training(ts, res.state, res.spec, cfg.train.quad_order), res.trace
    if kind == "gphom":
        return fit_gp_hom(ts, init, cfg.train), []
    if kind == "ml":
        return fit_ml(ts), []
    if kind == "fremen":
        t0, t1 = ts.time_span
        return fit_fremen_cells(ts, cfg.init.periods(t1 - t0), cfg.init.psi_max, cfg.init.folds), []
    raise DataError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")


def parse_resolution(text: str) -> tuple[float, float]:
    """``'0.75x60'`` (meters x minutes) -> ``(0.75, 3600.0)``."""
    try:
        r_s, minutes = (float(v) for v in text.lower().split("x"))
    except ValueError:
        raise DataError(f"resolution must look like 0.75x60 (meters x minutes), got {text!r}") from None
    if not (r_s > 0 and minutes > 0):
        raise DataError(f"resolution {text!r} must be positive")
    return r_s, minutes * 60.0


def _provenance(cfg: PipelineConfig, dataset_digest: str, **extra) -> dict:
    return {"config_digest": cfg.digest(), "seed": cfg.seed, "dataset_digest": dataset_digest, **extra}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: PipelineConfig, out, scenario: Optional[str] = None) -> dict:
    started = time.perf_counter()
    out = _out_dir(out)
    sc = cfg.synth
    kw = {k: v for k, v in (("train_days", sc.train_days), ("test_days", sc.test_days)) if v is not None}
    ds = make_dataset(scenario or sc.scenario, cfg.seed, **kw)
    paths = write_dataset(ds, out)
    elapsed = time.perf_counter() - started
    write_manifest(out, "synth", cfg, {}, paths, {"total": elapsed},
                   {"scenario": ds.name, "detections": len(ds.log)})
    return paths


def cmd_ingest(cfg: PipelineConfig, data_dir, out) -> dict:
    started = time.perf_counter()
    out = _out_dir(out)
    ds = load_dataset_dir(data_dir, cfg)
    ts, gt = ingest(ds, cfg)
    outputs = {"train": out / "train.npz"}
    save_training_set(ts, outputs["train"])
    if gt is not None:
        outputs["truth"] = out / "truth.npz"
        save_training_set(gt, outputs["truth"])
    summary = {"n": ts.n, "cells": int(np.unique(ts.cell).size), "r_s": cfg.grid.r_s, "tau": cfg.grid.tau,
               "ground_truth_rows": 0 if gt is None else gt.n}
    write_manifest(out, "ingest", cfg, ds.files, outputs, {"total": time.perf_counter() - started}, summary)
    return {k: str(v) for k, v in outputs.items()}


def cmd_init(cfg: PipelineConfig, train_path, out) -> str:
    started = time.perf_counter()
    out = _out_dir(out)
    ts = load_training_set(train_path)
    periodic, inducing = initialize(ts, cfg)
    path = out / "init.cpm"
    save_model((periodic, inducing), path, _provenance(cfg, file_digest(train_path)))
    summary = {"psi": periodic.psi, "periods_h": [float(p) / 3600 for p in periodic.gamma_hat],
               "variances": [float(v) for v in periodic.sigma2_hat], "m": int(len(inducing.Z))}
    write_manifest(out, "init", cfg, {"train": train_path}, {"init": path},
                   {"total": time.perf_counter() - started}, summary)
    return str(path)


def cmd_train(cfg: PipelineConfig, train_path, init_path, out, kind: str = "copamap") -> str:
    started = time.perf_counter()
    out = _out_dir(out)
    ts = load_training_set(train_path)
    init = load_model(init_path, kind="init")
    model, trace = fit(kind, ts, init, cfg)
    path = out / f"{kind}.cpm"
    save_model(model, path, _provenance(cfg, file_digest(train_path), init_digest=file_digest(init_path)))
    outputs = {"model": path}
    if trace:
        outputs["loss_trace"] = out / f"{kind}_loss.csv"
        write_loss_trace(trace, outputs["loss_trace"])
    summary = {"kind": kind, "steps": len(trace), "final_neg_elbo": trace[-1][1] if trace else None}
    write_manifest(out, "train", cfg, {"train": train_path, "init": init_path}, outputs,
                   {"total": time.perf_counter() - started}, summary)
    return str(path)


def cmd_predict(cfg: PipelineConfig, model_path, out, times: Sequence[float]) -> dict:
    """Field over every grid cell at the bins containing ``times``; CSV plus mean/variance heatmaps."""
    started = time.perf_counter()
    out = _out_dir(out)
    model = load_model(model_path, kind="copamap")
    if not times:
        raise DataError("predict needs at least one --time")
    g = model.grid
    bins = np.unique(g.bin_index(np.asarray(times, dtype=float)))
    field = model.predict(g.query_inputs(g.all_cells(), bins))
    outputs = {"field": out / "field.csv"}
    write_field_csv(field, outputs["field"])
    for which in ("mean", "var"):
        for p in write_heatmaps(field, out / "heatmaps", prefix=which, which=which):
            outputs[f"heatmap_{p.stem}"] = p
    write_manifest(out, "predict", cfg, {"model": model_path}, outputs, {"total": time.perf_counter() - started},
                   {"bins": [int(b) for b in bins], "rectified": field.n_rectified})
    return {k: str(v) for k, v in outputs.items()}


def cmd_eval(cfg: PipelineConfig, out, data_dir=None, resolutions: Sequence[str] = (),
             models: Sequence[str] = (), model_paths: Sequence = (), truth_path=None) -> list[dict]:
    """Score models against ground truth.

    With ``data_dir`` every requested resolution is ingested and every model
    kind trained from scratch; with ``model_paths`` the given files are scored
    against ``truth_path``.
    """
    started = time.perf_counter()
    out = _out_dir(out)
    rows, inputs, timings = [], {}, {}
    if model_paths:
        if truth_path is None:
            raise DataError("scoring model files needs --truth")
        gt = load_training_set(truth_path)
        inputs["truth"] = truth_path
        for i, mp in enumerate(model_paths):
            model = load_model(mp)
            if (model.grid.r_s, model.grid.tau) != (gt.grid.r_s, gt.grid.tau):
                raise DataError(f"{mp}: model resolution differs from the ground truth's")
            m = evaluate_model([model], [gt])
            inputs[f"model_{i}"] = mp
            rows.append({"model": model.kind, "r_s": gt.grid.r_s, "tau": gt.grid.tau, "nrmse": m.nrmse,
                         "chi2": m.chi2})
    else:
        if data_dir is None:
            raise DataError("eval needs --data or --model files")
        ds = load_dataset_dir(data_dir, cfg)
        if ds.test_span is None:
            raise DataError("eval needs a test span (data.test_span or truth.json)")
        inputs.update(ds.files)
        combos = [parse_resolution(r) for r in resolutions] or [(cfg.grid.r_s, cfg.grid.tau)]
        kinds = tuple(models) or cfg.bench.models
        for r_s, tau in combos:
            c = cfg.with_resolution(r_s, tau)
            ts, gt = ingest(ds, c)
            init = initialize(ts, c)
            for kind in kinds:
                t = time.perf_counter()
                model, _ = fit(kind, ts, init, c)
                m = evaluate_model([model], [gt])
                timings[f"{kind}_{r_s}x{tau / 60:g}"] = time.perf_counter() - t
                rows.append({"model": kind, "r_s": r_s, "tau": tau, "nrmse": m.nrmse, "chi2": m.chi2})
                log.info("%s %gx%g: nrmse %.4f chi2 %.4f", kind, r_s, tau / 60, m.nrmse, m.chi2)
    path = out / "metrics.csv"
    write_metrics_csv(rows, path)
    timings["total"] = time.perf_counter() - started
    write_manifest(out, "eval", cfg, inputs, {"metrics": path}, timings, {"rows": rows})
    return rows


def cmd_bench(cfg: PipelineConfig, data_dir, model_paths: Sequence, out) -> dict:
    """Service disturbance of each model's plans next to metric-shortest plans."""
    started = time.perf_counter()
    out = _out_dir(out)
    ds = load_dataset_dir(data_dir, cfg)
    if ds.test_span is None:
        raise DataError("bench needs a test span (data.test_span or truth.json)")
    if len(ds.goals) < 2:
        raise DataError("bench needs at least two goals (bench.goals or truth.json)")
    b = cfg.bench
    t_a, t_b = ds.test_span
    days = np.arange(t_a, t_b - 1e-9, DAY)
    scenario = Scenario(ds.goals, daily_departures(days, b.first_hour, b.last_hour, b.per_hour), b.speed,
                        b.radius)
    test_log = ds.log.between(t_a, t_b)
    models = [load_model(p) for p in model_paths]
    base_grid = models[0].grid if models else GridSpec.for_map(ds.occ, cfg.grid.r_s, cfg.grid.tau)
    names = [m.kind if [x.kind for x in models].count(m.kind) == 1 else f"{m.kind}{i}" for i, m in enumerate(models)]
    runs = [("metric", None, base_grid)] + [(n, model_rates(m, m.grid), m.grid) for n, m in zip(names, models)]
    outputs, summary = {}, {"p": scenario.p}
    for name, rates_at, grid in runs:
        report = run_scenario(scenario, rates_at, ds.occ, grid, test_log, b.base_cost)
        outputs[f"report_{name}"] = out / f"report_{name}.csv"
        outputs[f"curve_{name}"] = out / f"curve_{name}.csv"
        write_report_csv(report, outputs[f"report_{name}"])
        write_curve_csv(report, outputs[f"curve_{name}"])
        summary[f"E_{name}"] = float(report.E[-1])
    inputs = dict(ds.files)
    inputs.update({f"model_{i}": p for i, p in enumerate(model_paths)})
    write_manifest(out, "bench", cfg, inputs, outputs, {"total": time.perf_counter() - started}, summary)
    return summary


def cmd_info(path) -> dict:
    """Header and provenance of a model file, or the body of a manifest."""
    path = Path(path)
    if path.suffix == ".json":
        try:
            return json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: {exc}") from None
    meta, _ = read_header(path)
    info = {"file": str(path), **meta, "provenance": load_provenance(path)}
    model = load_model(path)
    if isinstance(model, tuple):
        per, ind = model
        info.update(psi=per.psi, periods_h=[float(p) / 3600 for p in per.gamma_hat], m=int(len(ind.Z)))
    else:
        info.update(r_s=model.grid.r_s, tau=model.grid.tau)
        if hasattr(model, "spec"):
            info["periodic"] = [list(p) for p in model.spec.periodic]
    return info


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _global_flags(parser, top: bool) -> argparse.ArgumentParser:
    # flags may come before or after the verb; subparser copies must not reset earlier values
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    parser.add_argument("--config", default=d(None), help="configuration file (INI); defaults apply when omitted")
    parser.add_argument("--seed", type=int, default=d(None), help="overrides run.seed")
    parser.add_argument("--out", default=d("."), help="output directory (default: current)")
    parser.add_argument("--threads", type=int, default=d(None), help="torch threads; overrides run.threads")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return parser


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(argparse.ArgumentParser(add_help=False), top=False)
    p = _global_flags(argparse.ArgumentParser(prog="copamap", description=__doc__.splitlines()[0]), top=True)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--scenario", help="overrides synth.scenario")

    s = sub.add_parser("ingest", parents=[common], help="bin a dataset into training rates and ground truth")
    s.add_argument("--data", required=True)
    s.add_argument("--resolution", help="meters x minutes, e.g. 0.75x60; overrides [grid]")

    s = sub.add_parser("init", parents=[common], help="periodic and inducing-point initialization")
    s.add_argument("--train", required=True)

    s = sub.add_parser("train", parents=[common], help="fit a model")
    s.add_argument("--train", required=True)
    s.add_argument("--init", required=True)
    s.add_argument("--model", default="copamap", choices=MODEL_KINDS)
    s.add_argument("--steps", type=int, help="overrides train.steps")

    s = sub.add_parser("predict", parents=[common], help="predictive field, CSV and heatmaps")
    s.add_argument("--model", required=True)
    s.add_argument("--time", type=float, action="append", default=[], help="seconds; repeatable")

    s = sub.add_parser("eval", parents=[common], help="NRMSE and chi-square against ground truth")
    s.add_argument("--data")
    s.add_argument("--resolution", action="append", default=[], help="meters x minutes; repeatable")
    s.add_argument("--models", help="comma-separated kinds to train (default: bench.models)")
    s.add_argument("--model", action="append", default=[], help="trained model file; repeatable")
    s.add_argument("--truth", help="ground truth from ingest (with --model)")

    s = sub.add_parser("bench", parents=[common], help="service disturbance versus metric planning")
    s.add_argument("--data", required=True)
    s.add_argument("--model", action="append", default=[], help="trained model file; repeatable")

    s = sub.add_parser("info", parents=[common], help="describe a model file or manifest")
    s.add_argument("path")
    return p


def _resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise DataError("--threads must be >= 1")
        cfg = replace(cfg, run=replace(cfg.run, threads=args.threads))
    return cfg


def run(args) -> object:
    cfg = _resolve_config(args)
    torch.set_num_threads(cfg.run.threads)
    verb = args.verb
    if verb == "synth":
        return cmd_synth(cfg, args.out, args.scenario)
    if verb == "ingest":
        if args.resolution:
            cfg = cfg.with_resolution(*parse_resolution(args.resolution))
        return cmd_ingest(cfg, args.data, args.out)
    if verb == "init":
        return cmd_init(cfg, args.train, args.out)
    if verb == "train":
        if args.steps is not None:
                cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
        return cmd_train(cfg, args.train, args.init, args.out, args.model)
    if verb == "predict":
        return cmd_predict(cfg, args.model, args.out, args.time)
    if verb == "eval":
        kinds = [k.strip() for k in args.models.split(",")] if args.models else []
        return cmd_eval(cfg, args.out, args.data, args.resolution, kinds, args.model, args.truth)
    if verb == "bench":
        return cmd_bench(cfg, args.data, args.model, args.out)
    return cmd_info(args.path)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except NumericalError as exc:
        print(f"copamap: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ModelFileError, NoPathError, OSError) as exc:
        print(f"copamap: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(json.dumps(result, indent=1, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
