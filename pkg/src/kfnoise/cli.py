"""``kfnoise`` command line: gen-data, train, eval, run, stats.

Exit codes: 0 success, 2 invalid input or configuration, 3 numeric
divergence, 4 file system error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, load_config, override
from .errors import (
    DatasetFormatError,
    InsufficientDataError,
    KFNoiseError,
    NotPositiveDefiniteError,
    NumericOverflowError,
    SingularMatrixError,
    TrainingStalledError,
)
from .innovation_stats import InnovationSequence, consistency_report
from .numerics import RandomSource
from .predictor import assemble_features, fit_normalization, init, load, save
from .runtime import ORACLE, coverage, evaluate_runs, run, validation_trajectories
from .training import (
    LABEL_NAMES,
    evaluate_labels,
    split_by_trajectory,
    train,
)
from .vehicle import (
    LABEL_HIGH,
    LABEL_LOW,
    ManeuverSpec,
    generate_dataset,
    manifest_hash,
    read_dataset,
    sample_labels,
    simulate,
    write_manifest,
)

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

# Independent seed streams per command so that changing one stage's
# settings never shifts the random numbers of another.
TRAIN_STREAM, EVAL_STREAM, RUN_STREAM = 1 << 40, 2 << 40, 3 << 40


class ParseError(KFNoiseError, ValueError):
    pass


class DivergedError(KFNoiseError, ArithmeticError):
    pass


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")


def _prepare_out(out: str, cfg: Config, command: str) -> Path:
    path = Path(out or "out")
    path.mkdir(parents=True, exist_ok=True)
    _write_json(path / f"config_{command}.json", {"version": __version__, "config": cfg.to_dict()})
    return path


def _resolve(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    return override(cfg, "", seed=args.seed)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = override(_resolve(args), "dataset", count=args.count)
    out = _prepare_out(args.out, cfg, "gen-data")
    ds = generate_dataset(
        cfg.dataset, cfg.vehicle, list(cfg.maneuvers), cfg.seed, out / "dataset.kfnd",
        cfg.model.options(), cfg.model.load_transfer, args.jobs,
    )
    write_manifest(ds.header, out / "manifest.json")
    print(f"samples: {len(ds)}")
    print(f"manifest sha256: {manifest_hash(ds.header)}")
    edges = np.linspace(LABEL_LOW, LABEL_HIGH, 6)
    for j, name in enumerate(LABEL_NAMES):
        counts, _ = np.histogram(ds.labels[:, j], bins=edges)
        print(f"{name:>3} histogram (5 bins over label range): {' '.join(str(c) for c in counts)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = override(_resolve(args), "training", variant=args.variant, epochs=args.epochs,
                   hidden=args.hidden, lr=args.lr, batch_size=args.batch_size)
    ds = read_dataset(args.data)
    out = _prepare_out(args.out, cfg, f"train_{cfg.training.variant}")
    t = cfg.training
    ctx = cfg.context()
    if ds.header.get("params") != asdict(cfg.vehicle) or ds.header.get("model_options") != asdict(
        cfg.model.options()
    ):
        raise DatasetFormatError("dataset vehicle model does not match the configuration")
    split = split_by_trajectory(ds, t.val_fraction)
    rng = RandomSource(cfg.seed + TRAIN_STREAM)
    kwargs = {}
    if t.normalize_inputs:
        features = assemble_features(ds.y[split[0]], ds.nu[split[0]], ds.prev_labels[split[0]])
        kwargs = dict(zip(("input_offset", "input_scale"), fit_normalization(features)))
    params = init(rng.spawn(0), t.hidden, **kwargs)
    columns = []

    def log(row):
        for key in row:
            if key not in columns:
                columns.append(key)
        print(" ".join(f"{k}={row[k]:.6g}" if isinstance(row[k], float) else f"{k}={row[k]}" for k in row))

    params, history = train(ds, params, t.loss_weights(), ctx, t.epochs, t.batch_size, t.lr,
                            rng.spawn(1), split, log)
    save(params, out / f"weights_{t.variant}.kfnw",
         meta={"variant": t.variant, "dataset_sha256": manifest_hash(ds.header), "seed": cfg.seed})
    with open(out / f"history_{t.variant}.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in history:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    summary = evaluate_labels(params, ds, split)
    _write_json(out / f"labels_{t.variant}.json", summary.to_json())
    return EXIT_OK


def _load_predictors(paths) -> dict:
    predictors = {}
    for path in paths:
        params, meta = load(path, with_meta=True)
        name = meta.get("variant") or Path(path).stem
        if name in predictors:
            name = Path(path).stem
        predictors[name] = params
    return predictors


def cmd_eval(args) -> int:
    cfg = override(_resolve(args), "runtime", runs=args.runs)
    if not args.weights and not args.baseline_only and not args.oracle_labels:
        raise ParseError("eval needs --weights, --oracle-labels or --baseline-only")
    predictors = {} if args.baseline_only else _load_predictors(args.weights or [])
    if args.oracle_labels:
        predictors["oracle"] = ORACLE
    out = _prepare_out(args.out, cfg, "eval")
    ctx = cfg.context()
    rng = RandomSource(cfg.seed + EVAL_STREAM)
    maneuvers = [ManeuverSpec(kind=s.kind, amplitude=s.amplitude, frequency=s.frequency,
                              duration=cfg.runtime.duration, dt=s.dt) for s in cfg.maneuvers]
    trajectories = validation_trajectories(
        cfg.runtime.runs, rng, cfg.vehicle, maneuvers, cfg.model.options(), cfg.model.load_transfer
    )
    table = evaluate_runs(ctx, predictors, default_labels=cfg.runtime.labels(),
                          stride=cfg.runtime.stride, trajectories=trajectories)
    table.to_csv(out / "runs_rmse.csv")
    summary = {"runs": table.runs, "state_rmse": {}, "label_rmse": {}, "consistency": {}}
    for name, (rb, rp) in zip(table.names, table.rmse):
        summary["state_rmse"][name] = {"beta": float(rb), "psidot": float(rp)}
        summary["consistency"][name] = _consistency(table.traces[name])
    if args.data:
        ds = read_dataset(args.data)
        split = split_by_trajectory(ds, cfg.training.val_fraction)
        for name, params in predictors.items():
            if name != "oracle":
                summary["label_rmse"][name] = evaluate_labels(params, ds, split).label_rmse
    _write_json(out / "eval_summary.json", summary)
    sys.stdout.write(table.to_csv())
    diverged = sum(table.diverged.values())
    if diverged:
        raise DivergedError(f"{diverged} run(s) diverged")
    return EXIT_OK


def _consistency(traces) -> dict:
    reports = []
    for tr in traces:
        mask = ~tr.warmup
        if mask.sum() < 2:
            continue
        rep = consistency_report(InnovationSequence(tr.innovations[mask], tr.S[mask]))
        reports.append(rep)
    if not reports:
        return {}
    return {
        "runs": len(reports),
        "whiteness_pass_runs": sum(bool(r.whiteness_pass) for r in reports),
        "nis_in_interval_runs": sum(bool(r.nis_in_interval) for r in reports),
        "mean_eps_bar": float(np.mean([r.eps_bar for r in reports])),
        "first_run": reports[0].to_json(),
    }


def cmd_run(args) -> int:
    cfg = _resolve(args)
    if bool(args.weights) == bool(args.oracle_labels):
        raise ParseError("run needs exactly one of --weights or --oracle-labels")
    predictor = ORACLE if args.oracle_labels else load(args.weights)
    out = _prepare_out(args.out, cfg, "run")
    rng = RandomSource(cfg.seed + RUN_STREAM)
    labels = sample_labels(rng)
    spec = ManeuverSpec(kind=args.maneuver or cfg.runtime.maneuver,
                        duration=args.duration or cfg.runtime.duration, dt=cfg.model.dt)
    traj = simulate(cfg.vehicle, spec, labels, rng, cfg.model.options(), cfg.model.load_transfer)
    trace = run(cfg.context(), predictor, traj, cfg.runtime.labels(), stride=cfg.runtime.stride)
    trace.to_csv(out / "trace.csv")
    print(f"true labels: Q_a={labels.Q_a:.6g} Q_b={labels.Q_b:.6g} R={labels.R:.6g}")
    if (~trace.warmup).any():
        cov = coverage(trace)
        print(f"3-sigma coverage: beta={cov[0]:.4f} psidot={cov[1]:.4f}")
    if trace.diverged:
        raise DivergedError(f"filter diverged after {len(trace)} steps")
    return EXIT_OK


def read_innovation_csv(path) -> InnovationSequence:
    """Read a CSV with a ``nu`` column and an optional ``S`` column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InsufficientDataError(f"{path}: file is empty")
        names = [h.strip() for h in header]
        if "nu" not in names:
            raise ParseError(f"{path}:1: missing 'nu' column")
        i_nu = names.index("nu")
        i_s = names.index("S") if "S" in names else None
        nu, S = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                nu.append(float(row[i_nu]))
                if i_s is not None:
                    S.append(float(row[i_s]))
            except (ValueError, IndexError):
                raise ParseError(f"{path}:{line_no}: cannot parse {','.join(row)!r}") from None
    if not nu:
        raise InsufficientDataError(f"{path}: no innovation samples")
    return InnovationSequence(np.array(nu), np.array(S) if i_s is not None else None)


def cmd_stats(args) -> int:
    seq = read_innovation_csv(args.innovations)
    report = consistency_report(seq, M=args.M, lags=args.lags)
    text = json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes")

    parser = argparse.ArgumentParser(prog="kfnoise", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="simulate a training dataset")
    p.add_argument("--count", type=int, help="number of samples")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one loss variant")
    p.add_argument("--data", required=True, help="dataset file from gen-data")
    p.add_argument("--variant", choices=("L1", "L2", "L3", "L4"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="label and closed-loop evaluation")
    p.add_argument("--weights", nargs="+", help="weights files from train")
    p.add_argument("--data", help="dataset for label RMSE")
    p.add_argument("--runs", type=int, help="number of validation runs")
    p.add_argument("--baseline-only", action="store_true", help="only the fixed-covariance baseline")
    p.add_argument("--oracle-labels", action="store_true", help="add a true-label predictor row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", parents=[common], help="single adaptive filter run")
    p.add_argument("--weights", help="weights file from train")
    p.add_argument("--oracle-labels", action="store_true", help="feed the true labels to the filter")
    p.add_argument("--maneuver", choices=("skidpad", "slalom", "fishhook"))
    p.add_argument("--duration", type=float, help="seconds")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("stats", parents=[common], help="consistency report for an innovation CSV")
    p.add_argument("innovations", help="CSV with a 'nu' column and optional 'S' column")
    p.add_argument("--M", type=int, default=5, help="correlation lags (default 5)")
    p.add_argument("--lags", type=int, default=20, help="autocorrelation lags (default 20)")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericOverflowError, SingularMatrixError, NotPositiveDefiniteError,
            TrainingStalledError, DivergedError) as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (KFNoiseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
