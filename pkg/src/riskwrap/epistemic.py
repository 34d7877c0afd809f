"""Epistemic uncertainty: Monte Carlo dropout, deep ensembles, VAE reconstruction."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, mse, no_grad
from .errors import ConfigError, DivergenceError, IncompatibleMetricError, NonFiniteError, UntrainedModelError
from .graph import clone_reinitialized, mirror_decoder
from .nn import Layer, SequentialModel
from .optim import make_optimizer
from .wrapper import (
    Batch,
    Metric,
    RiskAwareModel,
    TrainConfig,
    TrainingReport,
    _iterate_batches,
    load_wrapped,
    metric_from_dict,
    register,
    save_wrapped,
    train,
)


def sample_variance(samples: np.ndarray) -> np.ndarray:
    """Unbiased variance over axis 0; zeros for a single sample."""
    if samples.shape[0] < 2:
        return np.zeros(samples.shape[1:])
    return samples.var(axis=0, ddof=1)


# --------------------------------------------------------------------- dropout
def _pass_rngs(T: int, seed: int, pass_seeds=None):
    if pass_seeds is not None:
        if len(pass_seeds) != T:
            raise ConfigError("pass_seeds must have one entry per forward pass")
        return [np.random.default_rng(s) for s in pass_seeds]
    return [np.random.default_rng([seed, t]) for t in range(T)]


def has_stochastic_layers(model: SequentialModel) -> bool:
    return any(layer.kind == "dropout" and layer.dropout_rate > 0 for layer in model.layers)


def dropout_passes(g: RiskAwareModel, x, T: int, seed: int = 0, pass_seeds=None) -> dict[str, np.ndarray]:
    """Run ``T`` stochastic forward passes, collecting whatever the wrapped heads expose."""
    x = np.asarray(x, dtype=np.float64)
    mve, vae = g.metric("mve"), g.metric("vae")
    outs, sigmas, recons = [], [], []
    with no_grad():
        for rng in _pass_rngs(T, seed, pass_seeds):
            feats = g.features(x, rng=rng, stochastic=True)
            if mve is not None and g.task == "regression":
                mu, sigma = mve.moments(g, feats)
                outs.append(mu)
                sigmas.append(sigma)
            else:
                outs.append(g.head_output(feats).data)
            if vae is not None:
                recons.append(vae.vae.reconstruction_error(Tensor(x), feats, rng=rng, stochastic=True))
    result = {"outputs": np.stack(outs)}
    if sigmas:
        result["sigmas"] = np.stack(sigmas)
    if recons:
        result["recons"] = np.stack(recons)
    return result


def dropout_score(g: RiskAwareModel, x, T: int = 20, seed: int = 0, pass_seeds=None):
    """``(mean, unbiased variance)`` of ``T`` Monte Carlo dropout passes."""
    if T < 2:
        raise ConfigError("dropout scoring needs T >= 2")
    if not has_stochastic_layers(g.extractor) and not has_stochastic_layers(g.head):
        raise ConfigError("model has no stochastic (dropout) layers")
    outputs = dropout_passes(g, x, T, seed, pass_seeds)["outputs"]
    return outputs.mean(axis=0), sample_variance(outputs)


@register
@dataclass
class Dropout(Metric):
    """Insert dropout after every dense layer of the extractor; sample at inference."""

    name = "dropout"
    convention = "variance"

    rate: float = 0.1
    T: int = 20

    def validate(self) -> None:
        if not 0.0 < self.rate < 1.0:
            raise ConfigError("dropout rate must lie in (0, 1)")
        if self.T < 1:
            raise ConfigError("dropout needs T >= 1")

    def modify(self, layers, g):
        for i, layer in enumerate(layers):
            if layer.kind == "dropout":
                raise IncompatibleMetricError(
                    f"metric 'dropout' conflicts with existing dropout layer {i} of the extractor"
                )
        out = []
        for layer in layers:
            out.append(layer)
            if layer.kind == "dense":
                out.append(Layer("dropout", layer.out_dim, layer.out_dim, dropout_rate=self.rate))
        if len(out) == len(layers):
            raise IncompatibleMetricError("metric 'dropout' found no dense layer in the extractor")
        return out

    def score(self, g, x, sampling) -> dict:
        passes = dropout_passes(g, x, int(sampling.get("T", self.T)), sampling.get("seed", 0))
        outputs = passes["outputs"]
        out = {"risk": sample_variance(outputs), "mean": outputs.mean(axis=0), "samples_mu": outputs}
        if "sigmas" in passes:
            out["samples_sigma"] = passes["sigmas"]
        if "recons" in passes:
            out["samples_recon"] = passes["recons"]
        return out


# -------------------------------------------------------------------- ensemble
def _member_seed(train_seed: int, member_seed: int) -> int:
    return int(np.random.SeedSequence([train_seed, member_seed]).generate_state(1)[0])


@dataclass
class EnsembleModel:
    members: list[RiskAwareModel]
    seeds: list[int]

    def __len__(self) -> int:
        return len(self.members)


def build_members(model: SequentialModel, seeds, inner=(), split_index=None) -> list[RiskAwareModel]:
    return [
        RiskAwareModel(clone_reinitialized(model, s), list(inner), split_index=split_index, seed=s) for s in seeds
    ]


def train_members(members: list[RiskAwareModel], seeds, x, y, config: TrainConfig) -> list[TrainingReport]:
    """Train members independently; concurrent when ``config.workers > 1``."""

    def run(i):
        cfg = TrainConfig(
            epochs=config.epochs,
            batch_size=config.batch_size,
            optimizer=config.optimizer,
            lr=config.lr,
            seed=_member_seed(config.seed, seeds[i]),
        )
        try:
            return train(members[i], x, y, cfg)
        except DivergenceError as err:
            raise DivergenceError(
                f"ensemble member {i}: {err}", epoch=err.epoch, batch=err.batch, metric=err.metric, member=i
            ) from None

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(run, range(len(members))))
    return [run(i) for i in range(len(members))]


def ensemble_train(model: SequentialModel, N: int, x, y, config: TrainConfig | None = None,
                   member_seeds=None, inner=()) -> EnsembleModel:
    """Train ``N`` freshly initialized clones of ``model``, each with its own optimizer."""
    if N < 2:
        raise ConfigError("an ensemble needs N >= 2")
    seeds = list(member_seeds) if member_seeds is not None else list(range(N))
    if len(seeds) != N:
        raise ConfigError("member_seeds must have N entries")
    members = build_members(model, seeds, inner)
    train_members(members, seeds, x, y, config or TrainConfig())
    return EnsembleModel(members, seeds)


def member_outputs(members, x) -> tuple[np.ndarray, np.ndarray | None]:
    mus, sigmas = [], []
    with no_grad():
        for member in members:
            feats = member.features(x)
            mve = member.metric("mve")
            if mve is not None and member.task == "regression":
                mu, sigma = mve.moments(member, feats)
                mus.append(mu)
                sigmas.append(sigma)
            else:
                mus.append(member.head_output(feats).data)
    return np.stack(mus), (np.stack(sigmas) if sigmas else None)


def ensemble_score(E: EnsembleModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Mean and unbiased variance of the members' predictions."""
    mus, _ = member_outputs(E.members, np.asarray(x, dtype=np.float64))
    return mus.mean(axis=0), sample_variance(mus)


@register
@dataclass
class Ensemble(Metric):
    """``N`` independently initialized and trained copies of the model."""

    name = "ensemble"
    uses_backbone = False
    convention = "variance"

    N: int = 5
    member_seeds: tuple | None = None
    inner: tuple = ()
    members: list = field(default_factory=list, init=False, repr=False)
    used_seeds: list = field(default_factory=list, init=False, repr=False)

    def seeds(self, base: int = 0) -> list[int]:
        if self.member_seeds is not None:
            return list(self.member_seeds)
        return [base * 1000 + i for i in range(self.N)]

    def validate(self) -> None:
        if self.N < 2:
            raise ConfigError("an ensemble needs N >= 2")
        if self.member_seeds is not None:
            if len(self.member_seeds) != self.N:
                raise ConfigError("member_seeds must have N entries")
            if len(set(self.member_seeds)) != self.N:
                raise ConfigError("ensemble member seeds must be distinct")
        for m in self.inner:
            if m.name not in ("mve", "vae"):
                raise IncompatibleMetricError(
                    f"ensemble can only nest deterministic metrics (mve, vae), got {m.name!r}"
                )

    def augment(self, g, rng) -> None:
        self.used_seeds = self.seeds(g.seed)
        self.members = build_members(g.base, self.used_seeds, self.inner, g.split_index)

    def fit_extra(self, g, x, y, config):
        if config.epochs == 0:
            return []
        return train_members(self.members, self.used_seeds, x, y, config)

    def is_trained(self, g) -> bool:
        return bool(self.members) and all(m.steps > 0 for m in self.members)

    def score(self, g, x, sampling) -> dict:
        n = int(sampling.get("N", self.N))
        mus, sigmas = member_outputs(self.members[:n], x)
        out = {"risk": sample_variance(mus), "mean": mus.mean(axis=0), "samples_mu": mus}
        if sigmas is not None:
            out["samples_sigma"] = sigmas
        if any(m.metric("vae") is not None for m in self.members[:n]):
            with no_grad():
                out["samples_recon"] = np.stack(
                    [m.metric("vae").vae.reconstruction_error(Tensor(x), m.features(x)) for m in self.members[:n]]
                )
        return out

    def config_dict(self) -> dict:
        d = super().config_dict()
        d["member_seeds"] = list(self.member_seeds) if self.member_seeds is not None else None
        return d

    def save_extra(self, path: Path) -> None:
        root = path / "ensemble"
        root.mkdir(exist_ok=True)
        for i, member in enumerate(self.members):
            save_wrapped(member, root / f"member_{i}")
        manifest = {"N": len(self.members), "seeds": self.used_seeds, "members": [f"member_{i}" for i in range(len(self.members))]}
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def restore(self, g, models, state, path: Path) -> None:
        root = path / "ensemble"
        manifest = json.loads((root / "manifest.json").read_text())
        self.members = [load_wrapped(root / name) for name in manifest["members"]]


# ------------------------------------------------------------------------- VAE
@dataclass
class VaeConfig:
    latent_dim: int | None = None
    kl_weight: float = 1.0


def kl_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """Batch mean of ``0.5 * sum(exp(logvar) + mu^2 - 1 - logvar)``."""
    return ((logvar.exp() + mu.square() - 1.0 - logvar) * 0.5).sum(axis=1).mean()


class VaeModel:
    """Encoder = shared extractor + (mu, log-variance) heads; decoder = mirrored extractor."""

    def __init__(self, extractor: SequentialModel, latent_dim: int, kl_weight: float, rng: np.random.Generator):
        feature_dim = extractor.output_dim
        if not 1 <= latent_dim <= feature_dim:
            raise ConfigError(f"latent_dim must lie in [1, {feature_dim}], got {latent_dim}")
        if kl_weight < 0:
            raise ConfigError("kl_weight must be >= 0")
        self.extractor = extractor
        self.latent_dim = latent_dim
        self.kl_weight = float(kl_weight)
        mu = Layer("dense", feature_dim, latent_dim)
        logvar = Layer("dense", feature_dim, latent_dim)
        mu.init_params(rng)
        logvar.init_params(rng)
        self.mu_head = SequentialModel([mu])
        self.logvar_head = SequentialModel([logvar])
        self.decoder = mirror_decoder(extractor, latent_dim, seed=int(rng.integers(2**31)))

    def parameters(self) -> list[Tensor]:
        return self.mu_head.parameters() + self.logvar_head.parameters() + self.decoder.parameters()

    def loss_terms(self, x: Tensor, features: Tensor, rng) -> tuple[Tensor, Tensor]:
        mu = self.mu_head.forward(features)
        logvar = self.logvar_head.forward(features)
        z = mu + (logvar * 0.5).exp() * rng.standard_normal(mu.shape)
        recon = mse(self.decoder.forward(z), x)
        return recon, kl_standard_normal(mu, logvar)

    def loss(self, x: Tensor, features: Tensor, rng) -> Tensor:
        recon, kl = self.loss_terms(x, features, rng)
        return recon + kl * self.kl_weight

    def latent_mean(self, x) -> np.ndarray:
        with no_grad():
            return self.mu_head.forward(self.extractor.forward(x)).data

    def reconstruction_error(self, x: Tensor, features: Tensor, rng=None, stochastic=False) -> np.ndarray:
        """Per-sample mean squared reconstruction error, decoding the latent mean."""
        x_hat = self.decoder.forward(self.mu_head.forward(features))
        return ((x_hat.data - x.data) ** 2).mean(axis=1)

    def score(self, x) -> np.ndarray:
        x = Tensor(np.asarray(x, dtype=np.float64))
        with no_grad():
            return self.reconstruction_error(x, self.extractor.forward(x))


def vae_train(extractor: SequentialModel, x, config: VaeConfig | None = None,
              train_config: TrainConfig | None = None, seed: int = 0) -> tuple[VaeModel, list[float]]:
    """Fit a VAE on ``x`` that uses ``extractor`` (trained in place) as its encoder body."""
    config = config or VaeConfig()
    train_config = train_config or TrainConfig()
    latent = config.latent_dim or min(8, extractor.output_dim)
    vae = VaeModel(extractor, latent, config.kl_weight, np.random.default_rng(seed))
    x = np.asarray(x, dtype=np.float64)
    opt = make_optimizer(train_config.optimizer, extractor.parameters() + vae.parameters(), train_config.lr)
    rng = np.random.default_rng(train_config.seed)
    curve = []
    for epoch in range(train_config.epochs):
        total, count = 0.0, 0
        for b, idx in enumerate(_iterate_batches(len(x), train_config.batch_size, rng)):
            xb = Tensor(x[idx])
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = vae.loss(xb, extractor.forward(xb, mode="train", rng=rng), rng)
            except NonFiniteError as err:
                raise DivergenceError(f"vae forward pass diverged: {err}", epoch=epoch, batch=b,
                                      metric="vae") from None
            if not np.isfinite(loss.item()):
                raise DivergenceError("vae loss became non-finite", epoch=epoch, batch=b, metric="vae")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / count)
    return vae, curve


def vae_score(vae: VaeModel, x) -> np.ndarray:
    return vae.score(x)


@register
@dataclass
class VAE(Metric):
    """Reconstruction error of a VAE sharing the feature extractor as encoder."""

    name = "vae"
    convention = "reconstruction_mse"

    latent_dim: int | None = None
    kl_weight: float = 1.0
    weight: float = 1.0
    vae: VaeModel | None = field(default=None, init=False, repr=False)

    def validate(self) -> None:
        if self.latent_dim is not None and self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if self.kl_weight < 0 or self.weight < 0:
            raise ConfigError("kl_weight and weight must be >= 0")

    def augment(self, g, rng) -> None:
        latent = self.latent_dim or min(8, g.feature_dim)
        self.vae = VaeModel(g.extractor, latent, self.kl_weight, rng)

    def parameters(self):
        return self.vae.parameters()

    def loss(self, g, batch: Batch) -> Tensor:
        return self.vae.loss(batch.x, batch.features, batch.rng)

    def score(self, g, x, sampling) -> dict:
        xt = Tensor(x)
        return {"risk": self.vae.reconstruction_error(xt, g.features(xt))}

    def models(self):
        return {"mu_head": self.vae.mu_head, "logvar_head": self.vae.logvar_head, "decoder": self.vae.decoder}

    def restore(self, g, models, state, path) -> None:
        self.vae.extractor = g.extractor
        self.vae.mu_head = models["mu_head"]
        self.vae.logvar_head = models["logvar_head"]
        self.vae.decoder = models["decoder"]
