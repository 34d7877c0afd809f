"""The risk-aware transform: wrap a sequential model with one or more metrics.

Wrapping runs four stages in order:

1. split the model into a shared feature extractor and a head;
2. let each metric modify the extractor (e.g. insert dropout);
3. let each metric create its augmentations (sigma head, decoder, clones);
4. register each metric's loss term alongside the task loss.

The wrapped model trains with a metric-aware train step and predicts
``(prediction, risks)`` through :func:`predict_with_risk`.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, ClassVar

import numpy as np

from .autodiff import Tensor, cross_entropy_logits, mse, no_grad
from .errors import ConfigError, DivergenceError, IncompatibleMetricError, NonFiniteError, UntrainedModelError
from .graph import FeatureExtractor, split_feature_extractor
from .nn import SequentialModel, load_models, save_models
from .optim import make_optimizer

log = logging.getLogger(__name__)


# --------------------------------------------------------------------- configs
@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainingReport:
    curves: dict[str, list[float]] = field(default_factory=dict)
    steps: int = 0
    config: dict = field(default_factory=dict)
    members: list["TrainingReport"] = field(default_factory=list)

    @property
    def task_loss(self) -> list[float]:
        if "task" in self.curves:
            return self.curves["task"]
        return self.curves.get("mve", [])

    def metric_loss(self, name: str) -> list[float]:
        return self.curves.get(name, [])


@dataclass
class RiskOutput:
    """Prediction plus one risk array per configured metric (and composition)."""

    prediction: np.ndarray
    risks: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    details: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Batch:
    """Everything a metric loss may need from one training forward pass."""

    x: Tensor
    y: np.ndarray
    features: Tensor
    output: Tensor  # logits for classifiers
    rng: np.random.Generator


# ----------------------------------------------------------------- metric base
@dataclass
class Metric:
    """Base for metric wrappers.

    Subclasses are dataclasses whose init fields are the user-facing
    configuration; state created while wrapping lives in non-init fields.
    """

    name: ClassVar[str] = "metric"
    replaces_task_loss: ClassVar[bool] = False
    uses_backbone: ClassVar[bool] = True

    def validate(self) -> None:
        pass

    def check_compatible(self, others: list["Metric"]) -> None:
        pass

    def modify(self, layers: list, g: "RiskAwareModel") -> list:
        return layers

    def augment(self, g: "RiskAwareModel", rng: np.random.Generator) -> None:
        pass

    def parameters(self) -> list[Tensor]:
        return []

    def loss(self, g: "RiskAwareModel", batch: Batch) -> Tensor | None:
        return None

    def after_batch(self, g: "RiskAwareModel", batch: Batch) -> None:
        pass

    def fit_extra(self, g: "RiskAwareModel", x: np.ndarray, y: np.ndarray, config: TrainConfig) -> list:
        return []

    def after_training(self, g: "RiskAwareModel", x: np.ndarray) -> None:
        pass

    def is_trained(self, g: "RiskAwareModel") -> bool:
        return True

    def score(self, g: "RiskAwareModel", x: np.ndarray, sampling: dict) -> dict[str, np.ndarray]:
        raise NotImplementedError

    # serialization hooks
    def config_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self) if f.init}

    def models(self) -> dict[str, SequentialModel]:
        return {}

    def state(self) -> dict:
        return {}

    def restore(self, g: "RiskAwareModel", models: dict[str, SequentialModel], state: dict, path: Path) -> None:
        pass

    def save_extra(self, path: Path) -> None:
        pass


def _jsonable(value):
    if isinstance(value, Metric):
        return {"name": value.name, "config": value.config_dict()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


_REGISTRY: dict[str, type[Metric]] = {}


def register(cls: type[Metric]) -> type[Metric]:
    _REGISTRY[cls.name] = cls
    return cls


def metric_from_dict(d: dict) -> Metric:
    cls = _REGISTRY.get(d["name"])
    if cls is None:
        raise ConfigError(f"unknown metric {d['name']!r}")
    cfg = dict(d.get("config", {}))
    for key, value in list(cfg.items()):
        if key == "inner":
            cfg[key] = tuple(metric_from_dict(v) for v in value)
        elif isinstance(value, list):
            cfg[key] = tuple(value)
    return cls(**cfg)


def metric_from_name(name: str, **kwargs) -> Metric:
    cls = _REGISTRY.get(name)
    if cls is None:
        raise ConfigError(f"unknown metric {name!r}; known: {sorted(_REGISTRY)}")
    return cls(**kwargs)


# ------------------------------------------------------------------ the model
def _one_hot(y: np.ndarray, classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2 and y.shape[1] == classes:
        return y.astype(np.float64)
    out = np.zeros((len(y), classes))
    out[np.arange(len(y)), y.astype(int).reshape(-1)] = 1.0
    return out


class RiskAwareModel:
    """A model wrapped with risk metrics, sharing one feature extractor."""

    def __init__(self, model: SequentialModel, metrics, split_index: int | None = None, seed: int = 0):
        self.base = model
        self.split_index = split_index
        self.seed = seed
        self.task = "classification" if model.is_classifier else "regression"
        self.metrics: list[Metric] = [copy.deepcopy(m) for m in metrics]
        self.steps = 0
        self.plan = None
        self.loss_weights: dict[str, float] = {}

        names = [m.name for m in self.metrics]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise IncompatibleMetricError(f"metric identifiers must be unique, repeated: {sorted(dupes)}")
        for i, m in enumerate(self.metrics):
            m.validate()
            m.check_compatible(self.metrics[:i])

        # (1) shared feature extractor
        extractor, self.head = split_feature_extractor(model, split_index)
        # (2) metric-specific model modifications, in declaration order
        layers = list(extractor.layers)
        for m in self.metrics:
            layers = m.modify(layers, self)
        self.extractor = FeatureExtractor(layers)
        # (3) augmentations and new models
        rng = np.random.default_rng(seed)
        for m in self.metrics:
            m.augment(self, rng)
        # (4) loss terms combined with the task loss
        self.loss_weights = {"task": 1.0}
        for m in self.metrics:
            self.loss_weights[m.name] = float(getattr(m, "weight", 1.0))
        if any(m.replaces_task_loss for m in self.metrics):
            del self.loss_weights["task"]

    # ------------------------------------------------------------- accessors
    @property
    def feature_dim(self) -> int:
        return self.extractor.feature_dim

    @property
    def output_dim(self) -> int:
        return self.base.output_dim

    @property
    def input_dim(self) -> int:
        return self.base.input_dim

    def metric(self, name: str) -> Metric | None:
        for m in self.metrics:
            if m.name == name:
                return m
        return None

    def __contains__(self, name: str) -> bool:
        return self.metric(name) is not None

    @property
    def trains_backbone(self) -> bool:
        return any(m.uses_backbone for m in self.metrics) or not self.metrics

    def parameters(self) -> list[Tensor]:
        params = self.extractor.parameters() + self.head.parameters()
        for m in self.metrics:
            params += m.parameters()
        return params

    # --------------------------------------------------------------- forward
    def features(self, x, mode: str = "infer", rng=None, stochastic: bool = False) -> Tensor:
        return self.extractor.forward(x, mode=mode, rng=rng, stochastic=stochastic)

    def head_output(self, features: Tensor, logits: bool = False, mode: str = "infer", rng=None) -> Tensor:
        return self.head.forward(features, mode=mode, rng=rng, logits=logits)

    def __call__(self, x) -> RiskOutput:
        return predict_with_risk(self, x)

    def task_loss(self, output: Tensor, y: np.ndarray) -> Tensor:
        if self.task == "classification":
            return cross_entropy_logits(output, _one_hot(y, self.output_dim))
        return mse(output, np.asarray(y, dtype=np.float64).reshape(output.shape))

    def prediction_tensor(self, x: Tensor, logits: bool = False) -> Tensor:
        """Deterministic, taped prediction used for input gradients (FGSM)."""
        ens = self.metric("ensemble")
        if ens is not None and ens.members:
            outs = [m.prediction_tensor(x, logits=logits) for m in ens.members]
            total = outs[0]
            for o in outs[1:]:
                total = total + o
            return total / float(len(outs))
        return self.head_output(self.features(x), logits=logits)

    def batch_loss_terms(self, xb: np.ndarray, yb: np.ndarray, rng: np.random.Generator) -> tuple[dict, Batch]:
        x = Tensor(xb)
        feats = self.extractor.forward(x, mode="train", rng=rng)
        out = self.head.forward(feats, mode="train", rng=rng, logits=True)
        y = _one_hot(yb, self.output_dim) if self.task == "classification" else np.asarray(yb, dtype=np.float64).reshape(out.shape)
        batch = Batch(x=x, y=y, features=feats, output=out, rng=rng)
        terms: dict[str, Tensor] = {}
        if "task" in self.loss_weights:
            terms["task"] = self.task_loss(out, y)
        for m in self.metrics:
            term = m.loss(self, batch)
            if term is not None:
                terms[m.name] = term * self.loss_weights[m.name]
        return terms, batch

    def joint_train_step(self, xb, yb, opt, rng) -> dict[str, float]:
        """One optimizer step on the accumulated gradients of every loss term."""
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                terms, batch = self.batch_loss_terms(xb, yb, rng)
        except NonFiniteError as err:
            raise DivergenceError(f"forward pass diverged: {err}", metric="task") from None
        values = {}
        for name, term in terms.items():
            v = term.item()
            if not np.isfinite(v):
                raise DivergenceError(f"loss term {name!r} became non-finite", metric=name)
            values[name] = v
        for term in terms.values():
            term.backward()
        opt.step()
        self.steps += 1
        for m in self.metrics:
            m.after_batch(self, batch)
        return values


def wrap(model: SequentialModel, metrics, split_index: int | None = None, seed: int = 0) -> RiskAwareModel:
    """Transform ``model`` into a risk-aware variant for the given metrics."""
    metrics = list(metrics)
    if not metrics:
        raise ConfigError("wrap() needs at least one metric")
    return RiskAwareModel(model, metrics, split_index=split_index, seed=seed)


# -------------------------------------------------------------------- training
def _iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(g: RiskAwareModel, x, y, config: TrainConfig | None = None) -> TrainingReport:
    """Train every component of ``g`` on ``(x, y)``."""
    config = config or TrainConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[1] != g.input_dim:
        raise ConfigError(f"dataset inputs have shape {x.shape}, model expects width {g.input_dim}")
    if len(x) != len(y):
        raise ConfigError("inputs and targets differ in length")
    report = TrainingReport(config=asdict(config))

    if g.trains_backbone and config.epochs > 0:
        opt = make_optimizer(config.optimizer, g.parameters(), config.lr)
        rng = np.random.default_rng(config.seed)
        for epoch in range(config.epochs):
            sums: dict[str, float] = {}
            count = 0
            for b, idx in enumerate(_iterate_batches(len(x), config.batch_size, rng)):
                try:
                    values = g.joint_train_step(x[idx], y[idx], opt, rng)
                except DivergenceError as err:
                    err.epoch, err.batch = epoch, b
                    raise DivergenceError(
                        f"{err} (epoch {epoch}, batch {b})", epoch=epoch, batch=b, metric=err.metric
                    ) from None
                for k, v in values.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
                count += len(idx)
            for k, v in sums.items():
                report.curves.setdefault(k, []).append(v / count)
        report.steps = g.steps

    for m in g.metrics:
        report.members.extend(m.fit_extra(g, x, y, config))
    if config.epochs > 0:
        for m in g.metrics:
            m.after_training(g, x)
    return report


# ------------------------------------------------------------------ prediction
def default_sampling(g: RiskAwareModel) -> dict:
    s: dict[str, Any] = {"seed": 0}
    for m in g.metrics:
        if hasattr(m, "T"):
            s["T"] = m.T
        if hasattr(m, "N"):
            s["N"] = m.N
    return s


def check_trained(g: RiskAwareModel) -> None:
    if g.trains_backbone and g.steps == 0:
        raise UntrainedModelError("model heads have never been stepped; call train() first")
    for m in g.metrics:
        if not m.is_trained(g):
            raise UntrainedModelError(f"metric {m.name!r} has not been trained/fitted")


def predict_with_risk(g: RiskAwareModel, x, T: int | None = None, N: int | None = None, seed: int = 0) -> RiskOutput:
    """Prediction and per-metric risk scores for inputs ``x``."""
    check_trained(g)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    sampling = default_sampling(g)
    if T is not None:
        sampling["T"] = T
    if N is not None:
        sampling["N"] = N
    sampling["seed"] = seed

    with no_grad():
        scores = {m.name: m.score(g, x, sampling) for m in g.metrics}
        if g.trains_backbone:
            prediction = g.head_output(g.features(x)).data
        else:
            prediction = None
    for key in ("ensemble", "dropout"):
        if key in scores and "mean" in scores[key]:
            prediction = scores[key]["mean"]
            break
    risks = {name: s["risk"] for name, s in scores.items()}
    details = {}
    for name, s in scores.items():
        for k, v in s.items():
            if k != "risk":
                details[f"{name}.{k}"] = v
    metadata = {
        "sampling": sampling,
        "metrics": [m.name for m in g.metrics],
        "task": g.task,
        "conventions": {m.name: getattr(m, "convention", None) for m in g.metrics if getattr(m, "convention", None)},
    }
    if g.plan is not None:
        from .composer import apply_plan

        apply_plan(g, scores, risks, details, metadata)
    return RiskOutput(prediction=prediction, risks=risks, metadata=metadata, details=details)


# -------------------------------------------------------------- serialization
def save_wrapped(g: RiskAwareModel, directory) -> Path:
    """Write architecture + checkpoint + metric manifest into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    models = {"base": g.base, "extractor": g.extractor}
    for m in g.metrics:
        for key, model in m.models().items():
            models[f"{m.name}.{key}"] = model
    save_models(directory / "params.bin", models)
    manifest = {
        "format": "riskwrap-wrapped",
        "version": 1,
        "split_index": g.split_index,
        "seed": g.seed,
        "steps": g.steps,
        "task": g.task,
        "metrics": [{"name": m.name, "config": m.config_dict(), "state": m.state()} for m in g.metrics],
        "sampling": default_sampling(g),
        "plan": g.plan.to_dict() if g.plan is not None else None,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for m in g.metrics:
        m.save_extra(directory)
    return directory


def load_wrapped(directory) -> RiskAwareModel:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != "riskwrap-wrapped":
        raise ConfigError(f"{directory} does not hold a wrapped model")
    models, _ = load_models(directory / "params.bin")
    metrics = [metric_from_dict(d) for d in manifest["metrics"]]
    g = _assemble(models["base"], metrics, manifest["split_index"], manifest["seed"])
    # the saved extractor may hold inserted layers; reuse base layer objects where they alias
    saved = models["extractor"]
    base_layers = {id(layer) for layer in g.base.layers}
    for cur, old in zip(g.extractor.layers, saved.layers):
        if id(cur) not in base_layers and cur.has_params:
            cur.weight, cur.bias = old.weight, old.bias
    g.steps = manifest["steps"]
    for m, d in zip(g.metrics, manifest["metrics"]):
        sub = {k.split(".", 1)[1]: v for k, v in models.items() if k.startswith(m.name + ".")}
        m.restore(g, sub, d.get("state", {}), directory)
    if manifest.get("plan"):
        from .composer import CompositionPlan

        g.plan = CompositionPlan.from_dict(manifest["plan"])
    return g


def _assemble(model: SequentialModel, metrics, split_index, seed) -> RiskAwareModel:
    return RiskAwareModel(model, metrics, split_index=split_index, seed=seed)
