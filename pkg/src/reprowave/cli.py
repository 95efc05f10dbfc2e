"""Command-line entry point: config-driven experiment campaigns.

Pipeline commands, in dependency order:

    simulate   one benchmark (or explicit-pulse) simulation -> frame file
    dataset    train/val database + independent random test database
    train      multi-run ensemble under the configured precision/policy
    rollout    recurrent benchmark predictions for every trained run
    analyze    weight/featured-field deviation + random-database campaign
    report     merge everything into one JSON experiment summary

Every command resolves preset -> --config file -> --set overrides, then
writes the resolved configuration next to its outputs. Exit codes:
0 success, 1 usage/configuration error, 2 runtime or numerical failure
(missing prerequisites name the exact missing path).

Inference (rollout/analyze) always uses the fixed summation order, so
all commands are replayable byte-for-byte; the shuffled policy enters
only through training, which records each run's entropy reference.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis as ana
from .config import ConfigError, ExperimentConfig, load_config
from .containers import read_checkpoint, write_frame_container
from .dataset import (
    BENCHMARK_KINDS,
    PULSE_AMPLITUDE,
    Database,
    generate_database,
    generate_random_test_database,
    make_benchmark,
)
from .lbm import PulseSpec, frames_to_array, run_simulation
from .msnet import MultiScaleNet, count_parameters, load_arch
from .policy import FixedOrder
from .rollout import (
    NetPredictor,
    benchmark_suite,
    benchmark_truth,
    dump_trace_frames,
    write_trace_csv,
)
from .training import load_run_record, summarize_losses, train_ensemble

OUTPUT_ROOT_ENV = "REPROWAVE_OUT"


def _log(args, message: str) -> None:
    if not args.quiet:
        print(message, file=sys.stderr)


def _write_resolved(cfg: ExperimentConfig, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.ini").write_text(cfg.to_ini_text())


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing prerequisite ({hint}): {path}")
    return path


def _dump_json(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _parse_pulse(text: str) -> PulseSpec:
    parts = text.split(",")
    if len(parts) not in (2, 3, 4):
        raise ConfigError(f"--pulse wants x,y[,amplitude[,half_width]], got {text!r}")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"--pulse has a non-numeric field: {text!r}") from None
    amp = vals[2] if len(vals) > 2 else PULSE_AMPLITUDE
    hw = vals[3] if len(vals) > 3 else 12.0
    return PulseSpec((vals[0], vals[1]), amp, hw)


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: ExperimentConfig, args, root: Path) -> int:
    sim = cfg.sim_config()
    if args.steps is not None:
        sim = replace(sim, total_timesteps=args.steps)
    if args.pulse:
        scenario, init = "pulses", [_parse_pulse(p) for p in args.pulse]
    else:
        kind = args.benchmark or "centered-pulse"
        scenario, init = kind, make_benchmark(kind, sim)

    state = run_simulation(sim, init, "double")
    frames, steps = frames_to_array(state)
    out = root / "simulate"
    out.mkdir(parents=True, exist_ok=True)
    echo = dict(sim.to_echo())
    echo["scenario"] = scenario
    path = out / f"{scenario}.rwf"
    write_frame_container(path, frames, steps, echo)
    print(f"{path} frames={frames.shape[0]} last_step={steps[-1]}")
    return 0


def cmd_dataset(cfg: ExperimentConfig, args, root: Path) -> int:
    spec = cfg.database_spec()
    _log(args, f"generating database: {spec.n_sims_train}+{spec.n_sims_val} sims, "
               f"N={spec.sim_config.grid_size}")
    db = generate_database(spec, root / "database", workers=args.workers)
    for split in db.splits:
        _log(args, f"  {split}: {db.n_sims(split)} sims, "
                   f"{db.n_datapoints(split)} datapoints")

    test_spec = replace(
        spec, sim_config=replace(spec.sim_config, total_timesteps=cfg.test_total_timesteps)
    )
    _log(args, f"generating test database: {cfg.n_test_sims} sims")
    tdb = generate_random_test_database(cfg.n_test_sims, test_spec, root / "testdb",
                                        workers=args.workers)
    print(f"{db.root} datapoints={sum(db.n_datapoints(s) for s in db.splits)} "
          f"test_sims={tdb.n_sims('test')}")
    return 0


def cmd_train(cfg: ExperimentConfig, args, root: Path) -> int:
    if args.runs is not None:
        cfg.raw["training"]["n_runs"] = str(args.runs)
    if args.policy is not None:
        cfg.raw["experiment"]["policy"] = args.policy
    if args.precision is not None:
        cfg.raw["experiment"]["precision"] = args.precision
    if args.epochs is not None:
        cfg.raw["training"]["epochs"] = str(args.epochs)
    _write_resolved(cfg, root)  # rewrite with the effective values

    db = Database.open(_require(root / "database" / "manifest.txt", "run `dataset` first").parent)
    scales = load_arch(cfg.arch_source)
    tc = cfg.train_config()
    out_dir = root / "train" / tc.precision
    _log(args, f"training {tc.n_runs} run(s), {tc.epochs} epochs, "
               f"{tc.precision}/{tc.policy}, {count_parameters(scales)} parameters")
    records = train_ensemble(tc, db, scales, out_dir,
                             log=None if args.quiet else (lambda m: print(m, file=sys.stderr)),
                             workers=args.workers)

    summary = summarize_losses(records)
    summary["precision"] = tc.precision
    summary["policy"] = tc.policy
    summary["epochs"] = tc.epochs
    _dump_json(summary, out_dir / "summary.json")
    for rec in records:
        tag = " (aborted)" if rec.aborted else ""
        best = rec.best or {}
        print(f"{rec.run_id}: best epoch {best.get('epoch')} "
              f"val {best.get('val_loss')}{tag}")
    return 0


def _best_checkpoints(root: Path, precision: str) -> dict[str, Path]:
    """run_id -> best checkpoint path of a trained ensemble."""
    train_dir = _require(root / "train" / precision, "run `train` first")
    out = {}
    for run_dir in sorted(d for d in train_dir.iterdir() if d.is_dir()):
        record = load_run_record(run_dir)
        if record.best is None:
            continue
        out[record.run_id] = run_dir / record.best["file"]
    if not out:
        raise FileNotFoundError(f"missing prerequisite (no run checkpoints): {train_dir}")
    return out


def _load_net(cfg: ExperimentConfig, ckpt: Path, precision: str) -> MultiScaleNet:
    scales = load_arch(cfg.arch_source)
    net = MultiScaleNet(scales, precision)
    meta, arrays = read_checkpoint(ckpt, convert_to=precision)
    if meta["arch_hash"] != net.arch_hash:
        raise ValueError(f"{ckpt}: checkpoint architecture {meta['arch_hash']} "
                         f"does not match configured {net.arch_hash}")
    net.load_params(arrays)
    return net


def cmd_rollout(cfg: ExperimentConfig, args, root: Path) -> int:
    precision = cfg.precision
    bests = _best_checkpoints(root, precision)
    predictors = {
        run_id: NetPredictor(_load_net(cfg, path, precision), model_id=run_id)
        for run_id, path in bests.items()
    }
    sim = cfg.sim_config()
    n_rec = cfg.rollout_recurrences
    _log(args, f"rollout: {len(predictors)} model(s) x {cfg.rollout_benchmarks}, "
               f"r<={n_rec}")
    results = benchmark_suite(predictors, cfg.rollout_benchmarks, sim, n_rec,
                              eps_amp=PULSE_AMPLITUDE, weights=cfg.loss_weights)

    out = root / "rollout" / precision
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"recurrences": n_rec, "benchmarks": {}}
    for kind, block in results.items():
        entry: dict = {"aborted_models": [], "final_rmse_eps": {}}
        for trace in block["traces"]:
            write_trace_csv(trace, out / f"{kind}_{trace.model_id}.csv")
            if args.dump_frames or cfg.rollout_dump_frames:
                dump_trace_frames(trace, out / f"{kind}_{trace.model_id}.rwf", sim)
            if trace.aborted:
                entry["aborted_models"].append(trace.model_id)
            finals = [s.rmse_eps for s in trace.steps if s.rmse_eps is not None]
            entry["final_rmse_eps"][trace.model_id] = finals[-1] if finals else None
        if "loss_ratio" in block:
            ratios = [v for v in block["loss_ratio"] if v is not None]
            entry["loss_ratio"] = block["loss_ratio"]
            entry["max_loss_ratio"] = max(ratios) if ratios else None
        summary["benchmarks"][kind] = entry
    _dump_json(summary, out / "summary.json")
    print(out / "summary.json")
    return 0


def _ensemble_entries(cfg: ExperimentConfig, root: Path, precision: str) -> list[dict]:
    """One campaign entry per saved checkpoint of every run."""
    train_dir = _require(root / "train" / precision, "run `train` first")
    entries = []
    for run_dir in sorted(d for d in train_dir.iterdir() if d.is_dir()):
        record = load_run_record(run_dir)
        best_file = record.best["file"] if record.best else None
        for ck in record.checkpoints:
            net = _load_net(cfg, run_dir / ck["file"], precision)
            entries.append({
                "run": record.run_id, "epoch": ck["epoch"],
                "val_loss": ck["val_loss"],
                "predictor": NetPredictor(net, model_id=f"{record.run_id}@{ck['epoch']}"),
                "is_best": ck["file"] == best_file,
            })
    if not entries:
        raise FileNotFoundError(f"missing prerequisite (no run checkpoints): {train_dir}")
    return entries


def cmd_analyze(cfg: ExperimentConfig, args, root: Path) -> int:
    out = root / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    doc: dict = {}

    # Weight deviation for every trained precision; cross-precision medians.
    train_root = _require(root / "train", "run `train` first")
    weight_block: dict = {}
    for prec_dir in sorted(d for d in train_root.iterdir() if d.is_dir()):
        bests = _best_checkpoints(root, prec_dir.name)
        if len(bests) < 2:
            weight_block[prec_dir.name] = {"error": "needs >= 2 runs"}
            continue
        report = ana.weight_deviation_report(sorted(bests.values()))
        weight_block[prec_dir.name] = report.summary_dict()
    if {"single", "double"} <= {
        k for k, v in weight_block.items() if "quantiles" in v
    }:
        m32 = weight_block["single"]["quantiles"]["q50"]
        m64 = weight_block["double"]["quantiles"]["q50"]
        weight_block["comparison"] = {
            "median_single": m32, "median_double": m64,
            "double_below_single": bool(m64 < m32),
        }
    doc["weight_deviation"] = weight_block

    # Featured-field deviation across this precision's best models.
    precision = cfg.precision
    bests = _best_checkpoints(root, precision)
    if len(bests) >= 2:
        nets = [_load_net(cfg, p, precision) for _, p in sorted(bests.items())]
        frames = benchmark_truth(cfg.featured_benchmark, cfg.sim_config(), 0)[:4]
        fields = ana.featured_field_deviation(nets, frames)
        doc["featured_deviation"] = {
            name: {"mean": float(f.mean()), "max": float(f.max()),
                   "q50": float(np.quantile(f, 0.5))}
            for name, f in fields.items()
        }

    # Random-database campaign: every checkpoint of every run is a model.
    test_db = Database.open(_require(root / "testdb" / "manifest.txt",
                                     "run `dataset` first").parent)
    entries = _ensemble_entries(cfg, root, precision)
    _log(args, f"campaign: {len(entries)} models x {test_db.n_sims('test')} test sims, "
               f"r in {cfg.analysis_recurrences}")
    campaign = ana.random_database_campaign(entries, test_db, cfg.analysis_recurrences,
                                            PULSE_AMPLITUDE, cfg.loss_weights)
    doc["campaign"] = {
        "precision": precision,
        "recurrences": campaign["recurrences"],
        "per_r": {str(r): block for r, block in campaign["per_r"].items()},
    }

    _dump_json(doc, out / "analysis.json")
    with open(out / "regression.csv", "w") as fh:
        fh.write("r,exponent_a,prefactor_b,r_squared,p_value,n_points\n")
        for r in campaign["recurrences"]:
            fit = campaign["per_r"][r]["regression"]
            if "error" in fit:
                continue
            fh.write(f"{r},{fit['A']!r},{fit['B']!r},{fit['r_squared']!r},"
                     f"{fit['p_value']!r},{fit['n_points']}\n")
    print(out / "analysis.json")
    return 0


def cmd_report(cfg: ExperimentConfig, args, root: Path) -> int:
    train_root = _require(root / "train", "run `train` first")
    report: dict = {
        "experiment": {
            "seed": cfg.seed, "precision": cfg.precision, "policy": cfg.policy,
            "architecture": cfg.arch_source,
            "grid_size": cfg.sim_config().grid_size,
            "output_root": str(root),
        },
    }

    best_losses = {}
    for prec_dir in sorted(d for d in train_root.iterdir() if d.is_dir()):
        summary_path = _require(prec_dir / "summary.json", "run `train` first")
        best_losses[prec_dir.name] = json.loads(summary_path.read_text())
    if not best_losses:
        raise FileNotFoundError(f"missing prerequisite (no trained ensembles): {train_root}")
    report["best_losses"] = best_losses

    analysis_doc = json.loads(
        _require(root / "analysis" / "analysis.json", "run `analyze` first").read_text()
    )
    report["weight_deviation"] = analysis_doc["weight_deviation"]
    if "featured_deviation" in analysis_doc:
        report["featured_deviation"] = analysis_doc["featured_deviation"]

    campaign = analysis_doc["campaign"]
    regression = {}
    ratios = {}
    for r, block in campaign["per_r"].items():
        regression[r] = block["regression"]
        if "best_models_loss_ratio" in block:
            ratios[r] = block["best_models_loss_ratio"]
    report["rmse_regression"] = {
        "recurrences": campaign["recurrences"], "per_r": regression,
    }
    if ratios:
        report["best_models_loss_ratio"] = ratios

    rollout_summary = root / "rollout" / campaign["precision"] / "summary.json"
    if rollout_summary.exists():
        report["benchmark_rollout"] = json.loads(rollout_summary.read_text())

    _dump_json(report, root / "report" / "report.json")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


# ---------------------------------------------------------------- parsing


class CliParser(argparse.ArgumentParser):
    """argparse maps usage errors to exit code 2; this project uses 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> CliParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="INI config file")
    common.add_argument("--preset", choices=("desk", "paper"),
                        help="base preset (default: desk)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one resolved config value")
    common.add_argument("--out", metavar="DIR",
                        help=f"output root (also via ${OUTPUT_ROOT_ENV})")
    common.add_argument("--workers", type=int, default=1, metavar="N",
                        help="process count for per-simulation / per-run work")
    common.add_argument("--quiet", action="store_true", help="suppress progress logs")

    parser = CliParser(prog="reprowave",
                       description="Reproducibility experiments for a wave-propagation "
                                   "CNN surrogate: simulate, train, roll out, analyze.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("simulate", parents=[common],
                       help="run one simulation and store its frames")
    p.add_argument("--benchmark", choices=BENCHMARK_KINDS)
    p.add_argument("--pulse", action="append", metavar="X,Y[,AMP[,HW]]",
                   help="explicit pulse (domain fractions); repeatable")
    p.add_argument("--steps", type=int, metavar="T",
                   help="override total timesteps (0 = initial frame only)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dataset", parents=[common],
                       help="generate the train/val database and the random test set")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", parents=[common], help="train the run ensemble")
    p.add_argument("--runs", type=int, metavar="N", help="override training.n_runs")
    p.add_argument("--policy", choices=("fixed", "shuffled"))
    p.add_argument("--precision", choices=("single", "double"))
    p.add_argument("--epochs", type=int, metavar="N")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", parents=[common],
                       help="recurrent benchmark predictions for each trained run")
    p.add_argument("--dump-frames", action="store_true",
                   help="also store predicted fields as frame containers")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("analyze", parents=[common],
                       help="deviation reports and the random-database campaign")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", parents=[common],
                       help="merge all artifacts into one JSON summary")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.preset, args.set or (),
                          args.out or os.environ.get(OUTPUT_ROOT_ENV))
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        root = Path(cfg.output_root)
        _write_resolved(cfg, root)
        return args.func(cfg, args, root)
    except ConfigError as exc:
        print(f"reprowave: error: {exc}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        raise
    except Exception as exc:  # runtime / numerical failure
        print(f"reprowave: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
