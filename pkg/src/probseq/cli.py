"""Command-line entry point: ``probseq {train,evaluate,calibrate,ablate,sweep,synth}``.

Each command writes its artifacts plus a ``manifest.json`` (config echo,
seeds, library versions, wall time) into the output directory.  Everything
except the manifest is a deterministic function of config, seeds and data.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .calibration import binned_calibration, calibration_report, coverage_curve
from .data import SPLITS, by_split, generate_synthetic, save_dataset
from .errors import ConfigError, ProbseqError, SchemaError, UnsupportedMetricError
from .losses import LossWeights
from .model import SequenceRegressor, load_checkpoint, save_checkpoint
from .plots import Chart, Series, render_svg
from .runconfig import default_out_dir, load_config
from .training import collect_predictions, evaluate, fit, write_history

log = logging.getLogger("probseq")

COMMANDS = ("train", "evaluate", "calibrate", "ablate", "sweep", "synth")
METRICS = ("mae", "rmse", "nll")

ABLATIONS = (
    ("Full", {}, {}),
    ("w/o Attention", {"use_attention": False}, {}),
    ("w/o Residual", {"use_residual": False}, {}),
    ("w/o Variance Head", {"use_variance_head": False}, {"loss": "mse"}),
)

# alpha only shifts the loss by a constant, so it never changes gradients
SWEEP = (
    ((1.0, 1.0, 1.0), "standard NLL"),
    ((1.0, 2.0, 1.0), "uncertainty-averse"),
    ((1.0, 1.0, 2.0), "error-focused"),
    ((1.0, 1.0, 0.5), "calibration-first"),
)


# ---------------------------------------------------------------------------
# small helpers


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def mean_sd(values):
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "sd": sd}


def _splits(sessions, names):
    groups = by_split(sessions)
    missing = [n for n in names if not groups[n]]
    if missing:
        raise ConfigError(f"dataset has no sessions in split(s) {missing}")
    return groups


def _train_one(cfg, sessions, seed, model_overrides=None, train_overrides=None):
    dim = sessions[0].dim
    model = SequenceRegressor(cfg.model_config(dim, seed, **(model_overrides or {})))
    tcfg = cfg.train_config(seed, **(train_overrides or {}))
    result = fit(model, sessions, tcfg)
    return model, tcfg, result


def _metrics(model, sessions, transform):
    m = evaluate(model, sessions, transform)
    return {k: m.get(k) for k in METRICS}


def _seeds(args, cfg):
    return tuple(args.seed) if args.seed else cfg.seeds


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, cfg, out):
    sessions = cfg.load_sessions()
    groups = _splits(sessions, ("train", "dev", "test"))
    per_seed = {}
    for seed in _seeds(args, cfg):
        model, tcfg, result = _train_one(cfg, sessions, seed)
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, seed_dir / "checkpoint.npz", extra={"transform": tcfg.transform, "seed": seed})
        write_history(result.history, seed_dir / "history.csv")
        per_seed[str(seed)] = {
            "best_epoch": result.best_epoch,
            "stopped_early": result.stopped_early,
            "dev": _metrics(model, groups["dev"], tcfg.transform),
            "test": _metrics(model, groups["test"], tcfg.transform),
        }
        log.info("seed %d: dev %s test %s", seed, per_seed[str(seed)]["dev"], per_seed[str(seed)]["test"])
    aggregate = {}
    for split in ("dev", "test"):
        for metric in METRICS:
            vals = [r[split][metric] for r in per_seed.values()]
            if all(v is not None for v in vals):
                aggregate[f"{split}_{metric}"] = mean_sd(vals)
    summary = {"command": "train", "seeds": [int(s) for s in per_seed], "per_seed": per_seed, "aggregate": aggregate}
    _write_json(out / "summary.json", summary)
    return summary


def _checkpoint(args):
    if not args.checkpoint:
        raise ConfigError(f"{args.command} needs --checkpoint")
    model, extra = load_checkpoint(args.checkpoint)
    return model, extra.get("transform", "identity")


def cmd_evaluate(args, cfg, out):
    model, transform = _checkpoint(args)
    groups = by_split(cfg.load_sessions())
    metrics = {name: _metrics(model, groups[name], transform) for name in SPLITS if groups[name]}
    summary = {"command": "evaluate", "transform": transform, "metrics": metrics}
    _write_json(out / "metrics.json", summary)
    return summary


def calibration_artifacts(records, settings, out):
    """Write predictions, report and the three plot CSV/SVG pairs into ``out``."""
    report = calibration_report(records, settings.n_bins, settings.levels, settings.convention)
    records.to_csv(out / "predictions.csv")
    _write_json(out / "report.json", report.to_dict())

    binned = binned_calibration(records, settings.n_bins)
    _write_csv(out / "binned_calibration.csv", ["bin", "count", "mean_sigma", "mean_abs_error"], binned)
    scatter = [
        {"session": s, "t": int(t), "sigma": float(sg), "abs_error": float(e)}
        for s, t, sg, e in zip(records.session, records.t, records.sigma, records.abs_error)
    ]
    _write_csv(out / "scatter.csv", ["session", "t", "sigma", "abs_error"], scatter)
    curve = coverage_curve(records, convention=settings.convention)
    _write_csv(out / "coverage_curve.csv", ["level", "coverage"], curve)

    charts = {
        "binned_calibration.svg": Chart(
            "Binned calibration", "mean predicted sigma", "mean absolute error",
            [Series([r["mean_sigma"] for r in binned], [r["mean_abs_error"] for r in binned], "line")],
            diagonal=True,
        ),
        "scatter.svg": Chart(
            "Error vs uncertainty", "predicted sigma", "absolute error",
            [Series(records.sigma, records.abs_error)],
        ),
        "coverage_curve.svg": Chart(
            "Interval coverage", "nominal level", "empirical coverage",
            [Series([r["level"] for r in curve], [r["coverage"] for r in curve], "line")],
            diagonal=True,
        ),
    }
    for name, chart in charts.items():
        (out / name).write_text(render_svg(chart), encoding="utf-8")
    return report


def cmd_calibrate(args, cfg, out):
    model, transform = _checkpoint(args)
    if model.sigma_head is None:
        raise UnsupportedMetricError("checkpoint has no variance head; calibration needs a predictive sigma")
    split = cfg.calibration.split
    sessions = _splits(cfg.load_sessions(), (split,))[split]
    records, _ = collect_predictions(model, sessions, transform)
    report = calibration_artifacts(records, cfg.calibration, out)
    return {"command": "calibrate", "split": split, "ece_coverage": report.ece_coverage}


def _relative(variant, full):
    return 100.0 * (variant - full) / full if full != 0 else None


def cmd_ablate(args, cfg, out):
    sessions = cfg.load_sessions()
    groups = _splits(sessions, ("train", "dev", "test"))
    seeds = _seeds(args, cfg)
    rows = []
    for name, model_over, train_over in ABLATIONS:
        maes, rmses, params = [], [], None
        for seed in seeds:
            model, tcfg, _ = _train_one(cfg, sessions, seed, model_over, {"epochs": cfg.ablation_epochs, **train_over})
            m = _metrics(model, groups["test"], tcfg.transform)
            maes.append(m["mae"])
            rmses.append(m["rmse"])
            params = model.count_parameters()
        rows.append({"variant": name, "mae": float(np.mean(maes)), "rmse": float(np.mean(rmses)),
                     "mae_per_seed": maes, "rmse_per_seed": rmses, "parameters": params})
    full = rows[0]
    for r in rows:
        is_full = r is full
        r["delta_mae_pct"] = None if is_full else _relative(r["mae"], full["mae"])
        r["delta_rmse_pct"] = None if is_full else _relative(r["rmse"], full["rmse"])
    fields = ["variant", "mae", "rmse", "delta_mae_pct", "delta_rmse_pct", "parameters"]
    _write_csv(out / "ablation.csv", fields, [{k: r[k] for k in fields} for r in rows])
    summary = {"command": "ablate", "seeds": list(seeds), "epochs": cfg.ablation_epochs, "rows": rows}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_sweep(args, cfg, out):
    sessions = cfg.load_sessions()
    groups = _splits(sessions, ("train", "dev", "test"))
    seeds = _seeds(args, cfg)
    rows = []
    for (alpha, beta, gamma), comment in SWEEP:
        dev, test = [], []
        for seed in seeds:
            weights = LossWeights(alpha, beta, gamma)
            model, tcfg, _ = _train_one(cfg, sessions, seed, {"use_variance_head": True},
                                        {"loss": "gaussian_nll", "weights": weights})
            dev.append(_metrics(model, groups["dev"], tcfg.transform)["nll"])
            test.append(_metrics(model, groups["test"], tcfg.transform)["nll"])
        rows.append({"alpha": alpha, "beta": beta, "gamma": gamma, "comment": comment,
                     "dev_nll": mean_sd(dev), "test_nll": mean_sd(test),
                     "dev_nll_per_seed": dev, "test_nll_per_seed": test})
    flat = [
        {"alpha": r["alpha"], "beta": r["beta"], "gamma": r["gamma"],
         "dev_nll": r["dev_nll"]["mean"], "dev_nll_sd": r["dev_nll"]["sd"],
         "test_nll": r["test_nll"]["mean"], "test_nll_sd": r["test_nll"]["sd"], "comment": r["comment"]}
        for r in rows
    ]
    _write_csv(out / "sweep.csv", list(flat[0]), flat)
    summary = {"command": "sweep", "seeds": list(seeds), "rows": rows}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_synth(args, cfg, out):
    if cfg.synthetic is None:
        raise ConfigError("synth needs a 'synthetic' section in the config")
    seed = args.seed[0] if args.seed else None
    spec = cfg.synth_spec(seed)
    sessions, truth = generate_synthetic(spec)
    save_dataset(sessions, out / "dataset.jsonl")
    _write_json(out / "truth.json", truth)
    return {"command": "synth", "num_sessions": len(sessions), "seed": spec.seed}


HANDLERS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "calibrate": cmd_calibrate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "synth": cmd_synth,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="probseq", description="Probabilistic sequence regression toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, action="append", help="seed; repeat for several runs")
        p.add_argument("--out", help="output directory (default: $PROBSEQ_OUT/<command> or runs/<command>)")
        p.add_argument("--checkpoint", help="checkpoint file for evaluate/calibrate")
    return parser


def _manifest(args, cfg, seeds, elapsed, result):
    return {
        "command": args.command,
        "argv": sys.argv[1:],
        "config_path": str(args.config),
        "config_text": cfg.source_text,
        "config": cfg.echo(),
        "seeds": list(seeds),
        "checkpoint": args.checkpoint,
        "versions": {
            "probseq": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pyyaml": yaml.__version__,
        },
        "wall_time_s": elapsed,
        "result": result,
    }


def run(argv=None):
    """Parse ``argv`` and execute; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config)
        out = Path(args.out) if args.out else default_out_dir(args.command)
        out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        result = HANDLERS[args.command](args, cfg, out)
        elapsed = time.perf_counter() - start
        _write_json(out / "manifest.json", _manifest(args, cfg, _seeds(args, cfg), elapsed, result))
    except ProbseqError as exc:
        print(f"probseq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"probseq {args.command}: I/O error: {exc}", file=sys.stderr)
        return SchemaError.exit_code
    print(json.dumps(result, sort_keys=True))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
