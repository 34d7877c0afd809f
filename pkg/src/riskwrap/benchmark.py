"""End-to-end experiments emitting deterministic JSON/CSV results and figure data."""

from __future__ import annotations

import copy
import csv
import json
import logging
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .composer import CompositionPlan, compose
from .data import (
    CorruptionSpec,
    Dataset,
    corrupt_labels,
    fgsm_perturb,
    fixture_path,
    load_csv_regression,
    load_idx_images,
    make_cubic,
)
from .errors import ConfigError, DataError, DegenerateDimensionWarning
from .evaluation import BenchmarkResult, auc_roc, mean_std, nll_gaussian, rmse
from .nn import mlp
from .wrapper import RiskAwareModel, TrainConfig, metric_from_dict, predict_with_risk, train

log = logging.getLogger(__name__)

SUITES = ("cubic", "uci", "mislabel", "ood", "adversarial")
RESULT_FILES = ("results.json", "results.csv")


# --------------------------------------------------------------------- config
def default_config(suite: str) -> dict:
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {SUITES}")
    text = (resources.files("riskwrap") / "configs" / f"{suite}.json").read_text()
    return json.loads(text)


def load_config(path_or_dict, suite: str | None = None) -> dict:
    """Read a config file (or dict) and overlay it on the suite default."""
    if isinstance(path_or_dict, dict):
        user = copy.deepcopy(path_or_dict)
    else:
        try:
            user = json.loads(Path(path_or_dict).read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config {path_or_dict}: {err}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {path_or_dict} is not valid JSON: {err}") from None
    suite = suite or user.get("suite")
    if suite is None:
        raise ConfigError("config names no suite")
    if user.get("suite", suite) != suite:
        raise ConfigError(f"config is for suite {user['suite']!r}, not {suite!r}")
    cfg = default_config(suite)
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    return cfg


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], optimizer=t["optimizer"],
                       lr=t["lr"], seed=seed, workers=t.get("workers", 1))


def build_plan(spec: dict) -> CompositionPlan:
    try:
        members = [metric_from_dict(m) for m in spec["members"]]
        return CompositionPlan(members, spec.get("arrangement", "parallel"), spec.get("combination"),
                               spec.get("weights"))
    except (KeyError, TypeError) as err:
        raise ConfigError(f"bad wrapper spec {spec.get('name', spec)!r}: {err}") from None


def validate_config(cfg: dict) -> None:
    """Fail fast, before any training, on malformed configs."""
    if cfg.get("suite") not in SUITES:
        raise ConfigError(f"unknown suite {cfg.get('suite')!r}")
    for key in ("train", "trials", "model"):
        if key not in cfg:
            raise ConfigError(f"config missing {key!r}")
    if not isinstance(cfg.get("workers", 1), int) or cfg.get("workers", 1) < 1:
        raise ConfigError("workers must be a positive integer")
    if not isinstance(cfg["trials"], int) or cfg["trials"] < 1:
        raise ConfigError("trials must be a positive integer")
    _train_config(cfg, 0)
    hidden = cfg["model"].get("hidden", [])
    if not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError("model.hidden must be positive integers")
    names = [w.get("name") for w in cfg.get("wrappers", [])]
    if len(set(names)) != len(names):
        raise ConfigError("wrapper names must be unique")
    for w in cfg.get("wrappers", []):
        build_plan(w)
        if "name" not in w:
            raise ConfigError("every wrapper needs a name")


# -------------------------------------------------------------------- helpers
def trial_seeds(seed: int, trials: int) -> list[int]:
    return [seed + i for i in range(trials)]


def _build(dims, plan: CompositionPlan, seed: int, classifier: bool = False) -> RiskAwareModel:
    return compose(mlp(dims, seed=seed, classifier=classifier), plan, seed=seed)


def predictive_gaussian(g: RiskAwareModel, out) -> tuple[np.ndarray, np.ndarray | None]:
    """Predictive mean and std implied by a wrapped model's outputs, if it has one."""
    plan = g.plan
    if plan is not None and plan.arrangement == "series" and plan.identifier in out.risks:
        return out.details[f"{plan.identifier}.mean"], np.sqrt(out.risks[plan.identifier])
    if "mve" in out.risks:
        sigma = out.details["mve.sigma"]
        return out.prediction, sigma
    for name in ("ensemble", "dropout"):
        if name in out.risks:
            return out.prediction, np.sqrt(np.maximum(out.risks[name], 1e-12))
    return out.prediction, None


def epistemic_risk(out) -> np.ndarray:
    """Per-sample epistemic score: the first epistemic metric in the output."""
    for key, value in out.risks.items():
        if any(name in key for name in ("ensemble", "dropout", "vae")):
            v = np.asarray(value, dtype=np.float64)
            return v.reshape(len(v), -1).mean(axis=1)
    raise ConfigError("wrapper has no epistemic metric")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _jsonify(value):
    if isinstance(value, dict):
        return {str(k): _jsonify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonify(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonify(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


@dataclass
class BenchmarkRun:
    suite: str
    config: dict
    results: list[BenchmarkResult] = field(default_factory=list)
    figures: dict[str, tuple[list[str], list[list]]] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def result(self, dataset: str, wrapper: str) -> BenchmarkResult:
        for r in self.results:
            if r.dataset == dataset and r.wrapper == wrapper:
                return r
        raise KeyError((dataset, wrapper))

    def write(self, out_dir) -> Path:
        """Results and figure data are deterministic; wall-clock goes to timings.json."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        doc = {
            "suite": self.suite,
            "config": self.config,
            "notes": self.notes,
            "results": [r.to_dict() for r in self.results],
        }
        (out / "results.json").write_text(json.dumps(_jsonify(doc), indent=2, sort_keys=True) + "\n")
        write_csv(
            out / "results.csv",
            ["dataset", "wrapper", "rmse_mean", "rmse_std", "nll_mean", "nll_std", "trials", "trial_seeds"],
            [[r.dataset, r.wrapper, r.rmse_mean, r.rmse_std, r.nll_mean, r.nll_std, len(r.trial_seeds),
              " ".join(map(str, r.trial_seeds))] for r in self.results],
        )
        for name, (header, rows) in self.figures.items():
            write_csv(out / name, header, rows)
        (out / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True) + "\n")
        return out


# --------------------------------------------------------------------- suites
def _suite_cubic(cfg: dict, seeds: list[int], run: BenchmarkRun) -> None:
    d = cfg["data"]
    hidden = cfg["model"]["hidden"]
    far_lo, near_hi = d["far_abs_x"], d["near_abs_x"]
    for w in cfg["wrappers"]:
        rmses, nlls, ratios, peaks = [], [], [], []
        t0 = time.perf_counter()
        for s in seeds:
            ds = make_cubic(d["n_train"], d["n_test"], seed=s)
            g = _build([1, *hidden, 1], build_plan(w), s)
            train(g, ds.x_train, ds.y_train, _train_config(cfg, s))
            out = predict_with_risk(g, ds.x_test, seed=s)
            mu, sigma = predictive_gaussian(g, out)
            x = ds.x[ds.test_idx, 0]
            rmses.append(rmse(mu, ds.y_test, ds.y_std[0]))
            if sigma is not None:
                nlls.append(nll_gaussian(mu, sigma, ds.y_test, ds.y_std[0]))
            band = None
            if "mve" in out.risks:
                sig = np.asarray(out.details["mve.sigma"]).reshape(-1)
                peaks.append(float(x[np.argmax(sig)]))
                band = sig
            if any(k in out.risks for k in ("ensemble", "dropout", "vae")):
                r = epistemic_risk(out)
                ratios.append(float(r[np.abs(x) >= far_lo].mean() / r[np.abs(x) <= near_hi].mean()))
                band = r if band is None else band
            if s == seeds[0]:
                y_hat = ds.denormalize_y(np.asarray(mu).reshape(-1, 1)).reshape(-1)
                sd = None if sigma is None else np.asarray(sigma).reshape(-1) * ds.y_std[0]
                rows = [
                    [float(x[i]), float(x[i] ** 3), float(ds.y[ds.test_idx][i, 0]), float(y_hat[i]),
                     None if sd is None else float(sd[i]), None if band is None else float(band[i])]
                    for i in range(len(x))
                ]
                run.figures[f"figure_cubic_{w['name']}.csv"] = (
                    ["x", "y_clean", "y_observed", "y_hat", "predictive_std", "risk"], rows)
        extra = {}
        if ratios:
            extra["far_near_ratio_mean"], extra["far_near_ratio_std"] = mean_std(ratios)
            extra["far_near_ratio_trials"] = ratios
        if peaks:
            extra["sigma_argmax_x_trials"] = peaks
        run.results.append(BenchmarkResult.from_trials("cubic", w["name"], rmses, nlls, seeds,
                                                       cfg["train"], extra))
        run.timings[f"cubic/{w['name']}"] = time.perf_counter() - t0


def resolve_dataset_path(spec: dict) -> Path | None:
    if spec.get("env") and os.environ.get(spec["env"]):
        return Path(os.environ[spec["env"]])
    if spec.get("path"):
        return Path(spec["path"])
    if spec.get("fixture"):
        return fixture_path(spec["fixture"])
    return None


def _uci_datasets(cfg: dict, run: BenchmarkRun) -> list[tuple[dict, Path]]:
    found = []
    for spec in cfg["datasets"]:
        path = resolve_dataset_path(spec)
        if path is None or not path.exists():
            msg = f"dataset {spec['name']!r} not found" + (f" (set {spec['env']})" if spec.get("env") else "")
            if spec.get("optional"):
                run.notes.append(f"skipped: {msg}")
                continue
            raise DataError(msg)
        found.append((spec, path))
    return found


def _suite_uci(cfg: dict, seeds: list[int], run: BenchmarkRun) -> None:
    hidden = cfg["model"]["hidden"]
    for spec, path in _uci_datasets(cfg, run):
        for w in cfg["wrappers"]:
            rmses, nlls = [], []
            t0 = time.perf_counter()
            for s in seeds:
                ds = load_csv_regression(path, spec.get("target", -1), spec.get("split_fraction", 0.9), seed=s)
                g = _build([ds.x.shape[1], *hidden, 1], build_plan(w), s)
                train(g, ds.x_train, ds.y_train, _train_config(cfg, s))
                out = predict_with_risk(g, ds.x_test, seed=s)
                mu, sigma = predictive_gaussian(g, out)
                rmses.append(rmse(mu, ds.y_test, ds.y_std[0]))
                if sigma is not None:
                    nlls.append(nll_gaussian(mu, sigma, ds.y_test, ds.y_std[0]))
            run.results.append(BenchmarkResult.from_trials(
                spec["name"], w["name"], rmses, nlls, seeds, cfg["train"],
                {"rmse_trials": rmses, "nll_trials": nlls, "units": "de-standardized target"}))
            run.timings[f"uci/{spec['name']}/{w['name']}"] = time.perf_counter() - t0


def mislabel_trial(ds: Dataset, dims, w: dict, cfg: dict, p: float, seed: int) -> dict:
    """Corrupt, train an MVE classifier on every sample, rank class-``target`` samples by sigma."""
    c = cfg["corruption"]
    noisy, mask = corrupt_labels(ds, CorruptionSpec(c["source"], c["target"], p, seed), subset="all")
    g = _build(dims, build_plan(w), seed, classifier=True)
    train(g, noisy.x, noisy.y, _train_config(cfg, seed))
    out = predict_with_risk(g, noisy.x, seed=seed)
    score = np.asarray(out.details["mve.summary"])  # mean sigma over classes
    classes = int(noisy.y.max()) + 1
    per_class = [float(score[noisy.y == k].mean()) for k in range(classes)]
    labelled = np.flatnonzero(noisy.y == c["target"])
    k = int(mask.sum())
    top = labelled[np.argsort(-score[labelled], kind="stable")[:k]]
    return {
        "p": p,
        "corrupted": k,
        "precision_at_k": float(mask[top].mean()) if k else None,
        "per_class": per_class,
        "target_class_mean": per_class[c["target"]],
        "corrupted_mean": float(score[mask].mean()) if k else None,
        "clean_mean": float(score[~mask].mean()),
    }


def _suite_mislabel(cfg: dict, seeds: list[int], run: BenchmarkRun) -> None:
    d = cfg["data"]
    ds = load_idx_images(resolve_dataset_path(d))
    dims = [ds.x.shape[1], *cfg["model"]["hidden"], int(ds.y.max()) + 1]
    grid = cfg["corruption"]["p_grid"]
    for w in cfg["wrappers"]:
        t0 = time.perf_counter()
        cells = [(s, p) for s in seeds for p in grid]
        workers = cfg.get("workers", 1)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                flat = list(pool.map(lambda c: mislabel_trial(ds, dims, w, cfg, c[1], c[0]), cells))
        else:
            flat = [mislabel_trial(ds, dims, w, cfg, p, s) for s, p in cells]
        trials = [flat[i * len(grid) : (i + 1) * len(grid)] for i in range(len(seeds))]
        rows = []
        for j, p in enumerate(grid):
            cells = [t[j] for t in trials]
            tm, ts = mean_std([c["target_class_mean"] for c in cells])
            pm, ps = mean_std([c["precision_at_k"] for c in cells])
            per_class = np.mean([c["per_class"] for c in cells], axis=0)
            rows.append([p, tm, ts, pm, ps, *per_class.tolist()])
        classes = len(trials[0][0]["per_class"])
        run.figures[f"figure_mislabel_{w['name']}.csv"] = (
            ["p", "target_class_mean_aleatoric", "target_class_std", "precision_at_k", "precision_std",
             *[f"class_{k}_mean_aleatoric" for k in range(classes)]], rows)
        run.results.append(BenchmarkResult.from_trials(
            "mnist5k", w["name"], [], [], seeds, cfg["train"], {"trials": trials, "p_grid": grid}))
        run.timings[f"mislabel/{w['name']}"] = time.perf_counter() - t0


def _regression_task(cfg: dict, seed: int) -> Dataset:
    d = cfg["data"]
    path = resolve_dataset_path(d)
    if path is None or not path.exists():
        raise DataError(f"dataset {d.get('name', path)!r} not found")
    return load_csv_regression(path, d.get("target", -1), d.get("split_fraction", 0.9), seed=seed)


def _suite_ood(cfg: dict, seeds: list[int], run: BenchmarkRun) -> None:
    shift = cfg["data"]["shift"]
    hidden = cfg["model"]["hidden"]
    for w in cfg["wrappers"]:
        aucs = []
        t0 = time.perf_counter()
        for s in seeds:
            ds = _regression_task(cfg, s)
            g = _build([ds.x.shape[1], *hidden, 1], build_plan(w), s)
            train(g, ds.x_train, ds.y_train, _train_config(cfg, s))
            x_id = ds.x_test
            x_ood = x_id + shift  # every standardized feature moved by ``shift`` train stds
            r_id = epistemic_risk(predict_with_risk(g, x_id, seed=s))
            r_ood = epistemic_risk(predict_with_risk(g, x_ood, seed=s))
            aucs.append(auc_roc(r_id, r_ood))
            if s == seeds[0]:
                run.figures[f"figure_ood_{w['name']}.csv"] = (
                    ["split", "risk"], [["id", float(v)] for v in r_id] + [["ood", float(v)] for v in r_ood])
        m, sd = mean_std(aucs)
        run.results.append(BenchmarkResult.from_trials(
            cfg["data"]["name"], w["name"], [], [], seeds, cfg["train"],
            {"auc_mean": m, "auc_std": sd, "auc_trials": aucs, "shift": shift}))
        run.timings[f"ood/{w['name']}"] = time.perf_counter() - t0


def _suite_adversarial(cfg: dict, seeds: list[int], run: BenchmarkRun) -> None:
    eps_grid = cfg["attack"]["epsilons"]
    hidden = cfg["model"]["hidden"]
    for w in cfg["wrappers"]:
        table = []
        t0 = time.perf_counter()
        for s in seeds:
            ds = _regression_task(cfg, s)
            g = _build([ds.x.shape[1], *hidden, 1], build_plan(w), s)
            train(g, ds.x_train, ds.y_train, _train_config(cfg, s))
            x, y = ds.x_test, ds.y_test
            clip = None
            if cfg["attack"].get("clip_to_train_range", True):
                xt = ds.x_train
                clip = (xt.min(axis=0), xt.max(axis=0))
            base = epistemic_risk(predict_with_risk(g, x, seed=s))
            row = []
            for eps in eps_grid:
                x_adv = fgsm_perturb(g, x, y, eps, clip=clip)
                row.append(auc_roc(base, epistemic_risk(predict_with_risk(g, x_adv, seed=s))))
            table.append(row)
        arr = np.array(table)
        means = arr.mean(axis=0)
        stds = arr.std(axis=0, ddof=1) if len(seeds) >= 2 else np.full(len(eps_grid), np.nan)
        run.figures[f"figure_adversarial_{w['name']}.csv"] = (
            ["epsilon", "auc_mean", "auc_std"],
            [[float(e), float(m), None if np.isnan(sd) else float(sd)] for e, m, sd in zip(eps_grid, means, stds)])
        run.results.append(BenchmarkResult.from_trials(
            cfg["data"]["name"], w["name"], [], [], seeds, cfg["train"],
            {"epsilons": eps_grid, "auc_trials": table, "auc_mean": means.tolist(),
             "auc_std": [None if np.isnan(v) else float(v) for v in stds]}))
        run.timings[f"adversarial/{w['name']}"] = time.perf_counter() - t0


_RUNNERS = {
    "cubic": _suite_cubic,
    "uci": _suite_uci,
    "mislabel": _suite_mislabel,
    "ood": _suite_ood,
    "adversarial": _suite_adversarial,
}


def run_benchmark(suite: str, config=None, out_dir=None, seed: int | None = None,
                  trials: int | None = None) -> BenchmarkRun:
    """Run ``suite`` over ``trials`` seeds; write results into ``out_dir`` when given."""
    cfg = load_config(config if config is not None else {}, suite)
    cfg["suite"] = suite
    if seed is not None:
        cfg["seed"] = seed
    if trials is not None:
        cfg["trials"] = trials
    validate_config(cfg)
    seeds = trial_seeds(cfg.get("seed", 0), cfg["trials"])
    run = BenchmarkRun(suite, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateDimensionWarning)
        _RUNNERS[suite](cfg, seeds, run)
    if out_dir is not None:
        run.write(out_dir)
    return run
