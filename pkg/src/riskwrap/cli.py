"""Command-line interface: train, wrap, score, audit, benchmark."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .autodiff import cross_entropy_logits, mse
from .benchmark import SUITES, run_benchmark
from .bias import BiasReport, bias_features, bias_percentiles, fit_density
from .composer import CompositionPlan, compose
from .data import Dataset, fixture_path, load_csv_regression, load_idx_images, make_cubic, read_csv_table
from .errors import (
    ConfigError,
    DataError,
    DegenerateDimensionWarning,
    DivergenceError,
    NonFiniteError,
    RiskwrapError,
)
from .nn import load_checkpoint, mlp, save_checkpoint
from .optim import make_optimizer
from .wrapper import TrainConfig, load_wrapped, metric_from_name, predict_with_risk, save_wrapped, train

log = logging.getLogger("riskwrap")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
DATASET_FILE = "dataset.json"


# ------------------------------------------------------------------- datasets
def load_dataset(name: str, target=None, seed: int = 0, split: float = 0.9) -> Dataset:
    """``cubic``, ``boston``, ``mnist5k``, a CSV path or an IDX image path."""
    if name == "cubic":
        return make_cubic(seed=seed)
    if name == "boston":
        return load_csv_regression(fixture_path("boston.csv"), target or "MEDV", split, seed)
    if name == "mnist5k":
        return load_idx_images(fixture_path("mnist5k-images-idx3-ubyte.gz"), split_fraction=split, seed=seed)
    path = Path(name)
    if not path.exists():
        raise DataError(f"dataset {name!r} not found")
    if path.suffix == ".csv":
        return load_csv_regression(path, target if target is not None else -1, split, seed)
    return load_idx_images(path, split_fraction=split, seed=seed)


def _read_model_config(args) -> dict:
    cfg = {"hidden": [64, 64], "train": {}}
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from None
        cfg["hidden"] = user.get("model", {}).get("hidden", cfg["hidden"])
        cfg["train"] = user.get("train", {})
    if getattr(args, "hidden", None):
        cfg["hidden"] = [int(h) for h in args.hidden.split(",")]
    return cfg


def _train_config(args, cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    if args.epochs is not None:
        t["epochs"] = args.epochs
    t["seed"] = args.seed
    try:
        return TrainConfig(**t)
    except TypeError as err:
        raise ConfigError(f"bad train config: {err}") from None


def _metrics(names: str | None):
    if not names:
        return []
    return [metric_from_name(n.strip()) for n in names.split(",") if n.strip()]


def _fit_plain(model, x, y, config: TrainConfig) -> list[float]:
    """Ordinary training of an unwrapped model on its task loss."""
    opt = make_optimizer(config.optimizer, model.parameters(), config.lr)
    rng = np.random.default_rng(config.seed)
    curve = []
    for _ in range(config.epochs):
        total = 0.0
        for idx in np.array_split(rng.permutation(len(x)), max(1, int(np.ceil(len(x) / config.batch_size)))):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    out = model.forward(x[idx], mode="train", rng=rng, logits=True)
            except NonFiniteError as err:
                raise DivergenceError(f"forward pass diverged: {err}") from None
            if model.is_classifier:
                loss = cross_entropy_logits(out, np.eye(model.output_dim)[y[idx]])
            else:
                loss = mse(out, y[idx])
            if not np.isfinite(loss.data):
                raise DivergenceError("task loss became non-finite")
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        curve.append(total / len(x))
    return curve


def _save_dataset_manifest(ds: Dataset, out: Path) -> None:
    ds.write_manifest(out / DATASET_FILE)


def _emit(summary: dict) -> None:
    print(json.dumps(summary, indent=2, sort_keys=True))


# ------------------------------------------------------------------- commands
def cmd_train(args) -> int:
    cfg = _read_model_config(args)
    tc = _train_config(args, cfg)
    metrics = _metrics(args.metrics)
    ds = load_dataset(args.dataset, args.target, args.seed)
    classifier = ds.task == "classification"
    out_dim = int(ds.y.max()) + 1 if classifier else ds.y.shape[1]
    model = mlp([ds.x.shape[1], *cfg["hidden"], out_dim], seed=args.seed, classifier=classifier)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not metrics:
        curve = _fit_plain(model, ds.x_train, ds.y_train, tc)
        save_checkpoint(model, out / "model.bin")
        _save_dataset_manifest(ds, out)
        _emit({"checkpoint": str(out / "model.bin"), "final_loss": curve[-1] if curve else None})
        return EXIT_OK
    plan = CompositionPlan(metrics, args.arrangement)
    g = compose(model, plan, seed=args.seed)
    report = train(g, ds.x_train, ds.y_train, tc)
    save_wrapped(g, out)
    _save_dataset_manifest(ds, out)
    (out / "training.json").write_text(json.dumps({"curves": report.curves, "config": report.config},
                                                  indent=2, sort_keys=True) + "\n")
    _emit({"model_dir": str(out), "metrics": plan.names, "final": {k: v[-1] for k, v in report.curves.items()}})
    return EXIT_OK


def cmd_wrap(args) -> int:
    metrics = _metrics(args.metrics)
    if not metrics:
        raise ConfigError("wrap needs at least one metric (--metrics)")
    try:
        model = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as err:
        raise DataError(f"cannot read checkpoint {args.checkpoint}: {err}") from None
    g = compose(model, CompositionPlan(metrics, args.arrangement), seed=args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.dataset:
        cfg = _read_model_config(args)
        ds = load_dataset(args.dataset, args.target, args.seed)
        train(g, ds.x_train, ds.y_train, _train_config(args, cfg))
        _save_dataset_manifest(ds, out)
    src = Path(args.checkpoint).with_name(DATASET_FILE)
    save_wrapped(g, out)
    if not (out / DATASET_FILE).exists() and src.exists():
        (out / DATASET_FILE).write_text(src.read_text())
    _emit({"manifest": str(out / "manifest.json"), "metrics": [m.name for m in g.metrics], "trained": g.steps > 0})
    return EXIT_OK


def _normalization(model_dir: Path):
    path = model_dir / DATASET_FILE
    if not path.exists():
        return None
    return json.loads(path.read_text())


def _columns(name: str, value) -> tuple[list[str], np.ndarray]:
    v = np.asarray(value, dtype=np.float64)
    v = v.reshape(len(v), -1)
    if v.shape[1] == 1:
        return [name], v
    return [f"{name}[{j}]" for j in range(v.shape[1])], v


def risk_table(out) -> tuple[list[str], np.ndarray]:
    headers, blocks = [], []
    if out.prediction is not None:
        h, v = _columns("prediction", out.prediction)
        headers += h
        blocks.append(v)
    for name in sorted(out.risks):
        h, v = _columns(f"risk:{name}", out.risks[name])
        headers += h
        blocks.append(v)
    return headers, np.hstack(blocks)


def cmd_score(args) -> int:
    g = load_wrapped(args.model)
    _, table = read_csv_table(args.input)
    if table.shape[1] != g.input_dim:
        raise DataError(f"{args.input} has {table.shape[1]} columns, model expects {g.input_dim}")
    stats = _normalization(Path(args.model))
    x = table
    if stats:
        n = stats["normalization"]
        x = (table - np.array(n["x_mean"])) / np.array(n["x_std"])
    out = predict_with_risk(g, x, seed=args.seed)
    if stats and out.prediction is not None and "y_mean" in stats["normalization"]:
        n = stats["normalization"]
        out.prediction = np.asarray(out.prediction) * np.array(n["y_std"]) + np.array(n["y_mean"])
    headers, values = risk_table(out)
    fh = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(headers)
        for row in values:
            w.writerow([repr(float(v)) for v in row])
    finally:
        if args.output:
            fh.close()
    return EXIT_OK


def cmd_audit(args) -> int:
    g = load_wrapped(args.model)
    ds = load_dataset(args.dataset, args.target, args.seed)
    x, y = ds.x_train, ds.y_train
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bias = next((m for m in g.metrics if m.name.endswith("_bias")), None)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDimensionWarning)
        est = bias.estimator if bias is not None else fit_density(bias_features(g, x), "histogram")
    report: BiasReport = bias_percentiles(est, bias_features(g, x), alpha=args.alpha)
    report.to_csv(out / "bias_report.csv")
    summary = {"bias_report": str(out / "bias_report.csv"), "estimator": est.kind,
               "dropped_dims": est.dropped, "n": int(len(x))}
    if g.metric("mve") is not None:
        res = predict_with_risk(g, x, seed=args.seed)
        score = res.details.get("mve.summary", np.asarray(res.details["mve.sigma"]).reshape(len(x), -1).mean(axis=1))
        order = np.argsort(-np.asarray(score), kind="stable")
        with (out / "mislabel_ranking.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "sample_index", "label", "aleatoric"])
            for r, i in enumerate(order):
                label = int(y[i]) if ds.task == "classification" else repr(float(np.ravel(y[i])[0]))
                w.writerow([r, int(ds.train_idx[i]), label, repr(float(score[i]))])
        summary["mislabel_ranking"] = str(out / "mislabel_ranking.csv")
    _emit(summary)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    run = run_benchmark(args.suite, args.config, out_dir=args.out_dir, seed=args.seed, trials=args.trials)
    for r in run.results:
        line = f"{r.dataset:10s} {r.wrapper:10s}"
        if r.rmse_mean is not None:
            line += f" rmse {r.rmse_mean:.3f}" + (f" ± {r.rmse_std:.3f}" if r.rmse_std is not None else "")
        if r.nll_mean is not None:
            line += f"  nll {r.nll_mean:.3f}" + (f" ± {r.nll_std:.3f}" if r.nll_std is not None else "")
        print(line)
    for note in run.notes:
        print(note)
    print(f"results written to {args.out_dir}")
    return EXIT_OK


# --------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="riskwrap-out")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="riskwrap", description="Risk-aware wrappers for feed-forward models.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model, optionally wrapped")
    t.add_argument("--dataset", required=True, help="cubic, boston, mnist5k, or a CSV/IDX path")
    t.add_argument("--target", default=None, help="target column for CSV data")
    t.add_argument("--metrics", default=None, help="comma-separated metric names, e.g. mve,dropout")
    t.add_argument("--arrangement", choices=("parallel", "series"), default="parallel")
    t.add_argument("--hidden", default=None, help="hidden widths, e.g. 64,64")
    t.add_argument("--epochs", type=int, default=None)
    t.set_defaults(func=cmd_train)

    w = sub.add_parser("wrap", parents=[common], help="wrap an existing checkpoint")
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--metrics", required=True)
    w.add_argument("--arrangement", choices=("parallel", "series"), default="parallel")
    w.add_argument("--dataset", default=None, help="train the wrapped model on this dataset")
    w.add_argument("--target", default=None)
    w.add_argument("--epochs", type=int, default=None)
    w.set_defaults(func=cmd_wrap)

    s = sub.add_parser("score", parents=[common], help="score inputs with a wrapped model")
    s.add_argument("--model", required=True, help="wrapped model directory")
    s.add_argument("--input", required=True, help="CSV of raw features with a header row")
    s.add_argument("--output", default=None, help="CSV destination (default stdout)")
    s.set_defaults(func=cmd_score)

    a = sub.add_parser("audit", parents=[common], help="bias report and mislabel ranking")
    a.add_argument("--model", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--target", default=None)
    a.add_argument("--alpha", type=float, default=0.01)
    a.set_defaults(func=cmd_audit)

    b = sub.add_parser("benchmark", parents=[common], help="run an experiment suite")
    b.add_argument("suite", choices=SUITES)
    b.add_argument("--trials", type=int, default=None)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except RiskwrapError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
