"""Mean-and-variance estimation: a sigma head trained by likelihood.

Regression trains ``(mu, sigma)`` by Gaussian negative log-likelihood.
Classification treats logits as Gaussian, draws ``T`` reparameterized
samples, averages the *logits*, applies softmax and takes cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, cross_entropy_logits, gaussian_nll
from .errors import ConfigError, IncompatibleMetricError
from .nn import Layer, SequentialModel
from .wrapper import Batch, Metric, RiskAwareModel, register

SIGMA_FLOOR = 1e-6


def positive_sigma(raw: Tensor) -> Tensor:
    return raw.softplus() + SIGMA_FLOOR


def mve_regression_loss(mu: Tensor, sigma: Tensor, y) -> Tensor:
    return gaussian_nll(mu, sigma, y)


def mve_classification_step(mu: Tensor, sigma: Tensor, one_hot, T: int, rng) -> Tensor:
    """Cross-entropy of the softmax of the average of ``T`` stochastic logits."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if np.any(as_tensor(sigma).data < 0):
        raise ValueError("sigma must be non-negative")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    total = None
    for _ in range(T):
        z = mu + sigma * rng.standard_normal(mu.shape)
        total = z if total is None else total + z
    return cross_entropy_logits(total / float(T), one_hot)


@register
@dataclass
class MVE(Metric):
    """Aleatoric uncertainty via a predicted standard deviation."""

    name = "mve"
    replaces_task_loss = True

    T: int = 20
    risk: str = "sigma"
    weight: float = 1.0
    sigma_head: SequentialModel | None = field(default=None, init=False, repr=False)

    @property
    def convention(self) -> str:
        return self.risk

    def validate(self) -> None:
        if self.T < 1:
            raise ConfigError("MVE needs T >= 1")
        if self.risk not in ("sigma", "variance"):
            raise ConfigError("MVE risk must be 'sigma' or 'variance'")
        if self.weight < 0:
            raise ConfigError("metric weights must be >= 0")

    def check_compatible(self, others) -> None:
        for o in others:
            if o.name == "ensemble":
                raise IncompatibleMetricError(
                    "mve declared after ensemble: nest it inside the ensemble (ensemble(inner=[mve]))"
                )

    def augment(self, g: RiskAwareModel, rng) -> None:
        last = g.head.layers[-1]
        if last.kind not in ("dense", "softmax-output"):
            raise IncompatibleMetricError(f"mve needs a dense output layer, head ends with {last.kind!r}")
        layer = Layer("dense", g.feature_dim, g.output_dim)
        layer.init_params(rng)
        self.sigma_head = SequentialModel([layer])

    def parameters(self):
        return self.sigma_head.parameters()

    def sigma(self, features: Tensor) -> Tensor:
        return positive_sigma(self.sigma_head.forward(features))

    def loss(self, g: RiskAwareModel, batch: Batch) -> Tensor:
        sigma = self.sigma(batch.features)
        if g.task == "classification":
            return mve_classification_step(batch.output, sigma, batch.y, self.T, batch.rng)
        return mve_regression_loss(batch.output, sigma, batch.y)

    def moments(self, g: RiskAwareModel, features: Tensor) -> tuple[np.ndarray, np.ndarray]:
        mu = g.head_output(features, logits=True).data
        return mu, self.sigma(features).data

    def score(self, g: RiskAwareModel, x: np.ndarray, sampling: dict) -> dict:
        feats = g.features(x)
        mu, sigma = self.moments(g, feats)
        risk = sigma if self.risk == "sigma" else sigma**2
        out = {"risk": risk, "mu": mu, "sigma": sigma}
        if g.task == "classification":
            out["summary"] = sigma.mean(axis=1)
        return out

    def models(self):
        return {"sigma_head": self.sigma_head}

    def restore(self, g, models, state, path) -> None:
        self.sigma_head = models["sigma_head"]


def aleatoric_score(g: RiskAwareModel, x) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
    """Predicted sigma; for classifiers ``(per_class_sigma, mean_over_classes)``."""
    mve = g.metric("mve")
    if mve is None:
        raise ConfigError("model is not wrapped with mve")
    from .autodiff import no_grad

    with no_grad():
        _, sigma = mve.moments(g, g.features(np.asarray(x, dtype=np.float64)))
    if g.task == "classification":
        return sigma, sigma.mean(axis=1)
    return sigma
