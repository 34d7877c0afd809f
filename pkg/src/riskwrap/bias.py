"""Representation bias from the density of latent features.

Both estimators factorize the joint density as a product of
per-dimension marginals: a ``B``-bin histogram or a Gaussian KDE.
Dense regions of feature space are over-represented, sparse regions
under-represented.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .autodiff import no_grad
from .errors import ConfigError, DegenerateDimensionWarning, ShapeError
from .wrapper import Metric, register

FACTORIZATION = "product of per-dimension marginals"
_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class DensityEstimator:
    kind: str
    feature_dim: int
    kept: np.ndarray  # indices of non-degenerate dimensions
    dropped: list[int] = field(default_factory=list)
    total_count: int = 0
    # histogram
    edges: np.ndarray | None = None  # [kept, B+1]
    probs: np.ndarray | None = None  # [kept, B]
    # kde
    references: np.ndarray | None = None  # [n, kept]
    bandwidth: np.ndarray | None = None  # [kept]

    @property
    def bins(self) -> int:
        return 0 if self.probs is None else self.probs.shape[1]

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "feature_dim": self.feature_dim,
            "kept": self.kept.tolist(),
            "dropped": list(self.dropped),
            "total_count": self.total_count,
        }
        if self.kind == "histogram":
            d["edges"] = self.edges.tolist()
            d["probs"] = self.probs.tolist()
        else:
            d["references"] = self.references.tolist()
            d["bandwidth"] = self.bandwidth.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DensityEstimator":
        est = cls(d["kind"], d["feature_dim"], np.array(d["kept"], dtype=int), list(d["dropped"]), d["total_count"])
        if est.kind == "histogram":
            est.edges, est.probs = np.array(d["edges"]), np.array(d["probs"])
        else:
            est.references, est.bandwidth = np.array(d["references"]), np.array(d["bandwidth"])
        return est


def fit_density(features, kind: str = "histogram", bins: int = 10, bandwidth=None) -> DensityEstimator:
    """Fit a factorized histogram or Gaussian KDE on ``features[batch, d]``."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f.reshape(-1, 1)
    n, d = f.shape
    if n < 2 or d < 1:
        raise ShapeError("density fitting needs at least 2 samples and 1 dimension")
    if kind not in ("histogram", "kde"):
        raise ConfigError(f"unknown density kind {kind!r}")
    lo, hi = f.min(axis=0), f.max(axis=0)
    degenerate = np.flatnonzero(hi <= lo)
    if degenerate.size:
        warnings.warn(
            f"constant feature dimensions {degenerate.tolist()} dropped from the density",
            DegenerateDimensionWarning,
            stacklevel=2,
        )
    kept = np.flatnonzero(hi > lo)
    if kept.size == 0:
        raise ShapeError("every feature dimension is constant; no density can be fitted")
    est = DensityEstimator(kind, d, kept, degenerate.tolist(), n)
    f = f[:, kept]
    if kind == "histogram":
        if bins < 1:
            raise ConfigError("bins must be >= 1")
        edges = np.linspace(lo[kept], hi[kept], bins + 1).T  # [kept, B+1]
        idx = _bin_index(f, edges)
        counts = np.zeros((kept.size, bins))
        for j in range(kept.size):
            counts[j] = np.bincount(idx[:, j], minlength=bins)
        est.edges, est.probs = edges, counts / n
    else:
        if bandwidth is None:
            # per-dimension Scott's rule
            h = f.std(axis=0, ddof=1) * n ** (-1.0 / 5.0)
        else:
            h = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), (d,))[kept].copy()
        if np.any(h <= 0):
            raise ConfigError("bandwidths must be positive")
        est.references, est.bandwidth = f.copy(), h
    return est


def _bin_index(f: np.ndarray, edges: np.ndarray) -> np.ndarray:
    bins = edges.shape[1] - 1
    width = (edges[:, -1] - edges[:, 0]) / bins
    idx = np.floor((f - edges[:, 0]) / width).astype(int)
    return np.clip(idx, 0, bins - 1)


def log_density_score(est: DensityEstimator, features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f.reshape(-1, 1) if est.feature_dim == 1 else f.reshape(1, -1)
    if f.shape[1] != est.feature_dim:
        raise ShapeError(f"estimator fitted on {est.feature_dim} dims, got {f.shape[1]}")
    f = f[:, est.kept]
    if est.kind == "histogram":
        idx = _bin_index(f, est.edges)
        per_dim = est.probs[np.arange(est.kept.size)[None, :], idx]
        with np.errstate(divide="ignore"):
            return np.log(per_dim).sum(axis=1)
    out = np.zeros(len(f))
    for j in range(est.kept.size):
        h = est.bandwidth[j]
        u = (f[:, j : j + 1] - est.references[None, :, j]) / h
        dens = np.exp(-0.5 * u * u).mean(axis=1) / (h * _SQRT_2PI)
        with np.errstate(divide="ignore"):
            out += np.log(dens)
    return out


def density_score(est: DensityEstimator, features) -> np.ndarray:
    """Joint (factorized) density of each sample's features."""
    return np.exp(log_density_score(est, features))


@dataclass
class BiasReport:
    scores: np.ndarray
    percentiles: np.ndarray
    weights: np.ndarray
    metadata: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_index", "score", "percentile", "weight"])
            for i, (s, p, wt) in enumerate(zip(self.scores, self.percentiles, self.weights)):
                w.writerow([i, repr(float(s)), repr(float(p)), repr(float(wt))])


def percentile_ranks(scores) -> np.ndarray:
    """Average-rank percentiles in [0, 100]; a full tie maps to 50."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 1:
        return np.array([50.0])
    return (rankdata(s, method="average") - 1.0) / (s.size - 1) * 100.0


def debias_weights(report_or_scores, alpha: float = 0.01) -> np.ndarray:
    """``1 / (score + alpha)`` normalized to mean 1; use as sampling weights."""
    if alpha <= 0:
        raise ConfigError("alpha must be > 0")
    scores = report_or_scores.scores if isinstance(report_or_scores, BiasReport) else report_or_scores
    raw = 1.0 / (np.asarray(scores, dtype=np.float64) + alpha)
    return raw / raw.mean()


def bias_percentiles(est: DensityEstimator, features, alpha: float = 0.01) -> BiasReport:
    scores = density_score(est, features)
    return BiasReport(
        scores=scores,
        percentiles=percentile_ranks(scores),
        weights=debias_weights(scores, alpha),
        metadata={
            "kind": est.kind,
            "factorization": FACTORIZATION,
            "dropped_dims": list(est.dropped),
            "alpha": alpha,
        },
    )


def resample_indices(weights, size: int, seed: int = 0) -> np.ndarray:
    """Draw ``size`` indices with probability proportional to ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    return np.random.default_rng(seed).choice(len(w), size=size, replace=True, p=w / w.sum())


# --------------------------------------------------------------------- metrics
def bias_features(g, x) -> np.ndarray:
    """VAE latent mean when a VAE is attached, else the extractor's features."""
    vae = g.metric("vae")
    with no_grad():
        if vae is not None:
            return vae.vae.latent_mean(np.asarray(x, dtype=np.float64))
        return g.features(np.asarray(x, dtype=np.float64)).data


@dataclass
class _DensityBias(Metric):
    kind = "histogram"
    convention = "density"
    estimator: DensityEstimator | None = field(default=None, init=False, repr=False)

    def _fit(self, feats):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateDimensionWarning)
            try:
                return fit_density(feats, self.kind, **self._fit_kwargs())
            except ShapeError:
                return self.estimator

    def after_batch(self, g, batch) -> None:
        if len(batch.x) >= 2:
            self.estimator = self._fit(bias_features(g, batch.x.data))

    def after_training(self, g, x) -> None:
        self.estimator = fit_density(bias_features(g, x), self.kind, **self._fit_kwargs())

    def is_trained(self, g) -> bool:
        return self.estimator is not None

    def score(self, g, x, sampling) -> dict:
        return {"risk": density_score(self.estimator, bias_features(g, x))}

    def report(self, g, x, alpha: float = 0.01) -> BiasReport:
        return bias_percentiles(self.estimator, bias_features(g, x), alpha)

    def state(self) -> dict:
        return {"estimator": self.estimator.to_dict() if self.estimator is not None else None}

    def restore(self, g, models, state, path) -> None:
        if state.get("estimator") is not None:
            self.estimator = DensityEstimator.from_dict(state["estimator"])


@register
@dataclass
class HistogramBias(_DensityBias):
    name = "histogram_bias"
    kind = "histogram"
    bins: int = 10

    def validate(self) -> None:
        if self.bins < 1:
            raise ConfigError("bins must be >= 1")

    def _fit_kwargs(self):
        return {"bins": self.bins}


@register
@dataclass
class KDEBias(_DensityBias):
    name = "kde_bias"
    kind = "kde"
    bandwidth: float | None = None

    def validate(self) -> None:
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")

    def _fit_kwargs(self):
        return {"bandwidth": self.bandwidth}
