"""Evaluation metrics: RMSE, Gaussian NLL, AUC-ROC, calibration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm, rankdata

from .errors import ConfigError, DataError

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.reshape(-1), b.reshape(-1)


def rmse(y_hat, y, scale: float | np.ndarray = 1.0) -> float:
    """Root mean squared error, multiplied by ``scale`` to undo target standardization."""
    y_hat, y = _pair(y_hat, y)
    return float(np.sqrt(np.mean(((y_hat - y) * np.asarray(scale).reshape(-1)) ** 2)))


def nll_terms(mu, sigma, y) -> np.ndarray:
    mu, y = _pair(mu, y)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), np.shape(sigma)).reshape(-1)
    if sigma.size == 1:
        sigma = np.full_like(mu, sigma[0])
    if sigma.size != mu.size:
        raise ValueError("sigma must match mu in size")
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    return HALF_LOG_2PI + np.log(sigma) + 0.5 * ((y - mu) / sigma) ** 2


def nll_gaussian(mu, sigma, y, scale: float = 1.0) -> float:
    """Mean Gaussian negative log-likelihood.

    With ``scale`` (the target std used for standardization) the value is
    reported in original target units: ``nll_std + log(scale)``.
    """
    return float(np.mean(nll_terms(mu, sigma, y)) + np.log(scale))


def auc_roc(scores_negative, scores_positive) -> float:
    """P(positive score > negative score) with ties counting one half."""
    neg = np.asarray(scores_negative, dtype=np.float64).reshape(-1)
    pos = np.asarray(scores_positive, dtype=np.float64).reshape(-1)
    if neg.size == 0 or pos.size == 0:
        raise DataError("auc_roc needs non-empty negative and positive score sets")
    ranks = rankdata(np.concatenate([neg, pos]), method="average")
    u = ranks[neg.size :].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (neg.size * pos.size))


def auc_roc_bruteforce(scores_negative, scores_positive) -> float:
    neg = np.asarray(scores_negative, dtype=np.float64).reshape(-1, 1)
    pos = np.asarray(scores_positive, dtype=np.float64).reshape(1, -1)
    if neg.size == 0 or pos.size == 0:
        raise DataError("auc_roc needs non-empty negative and positive score sets")
    return float(((pos > neg).sum() + 0.5 * (pos == neg).sum()) / (neg.size * pos.size))


@dataclass
class CalibrationCurve:
    expected: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        self.expected = np.asarray(self.expected, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=np.float64)
        if self.expected.shape != self.observed.shape:
            raise ValueError("expected and observed must have the same length")
        if np.any(np.diff(self.expected) <= 0):
            raise ValueError("expected grid must be strictly increasing")

    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.observed - self.expected)))

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.expected.tolist(), self.observed.tolist()))


def calibration_curve(mu, sigma, y, grid=None) -> CalibrationCurve:
    """Coverage of central Gaussian intervals of mass ``c`` for each ``c`` in ``grid``."""
    mu, y = _pair(mu, y)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if sigma.size == 1:
        sigma = np.full_like(mu, sigma[0])
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    grid = np.linspace(0.05, 0.95, 19) if grid is None else np.asarray(grid, dtype=np.float64)
    if np.any((grid < 0) | (grid > 1)):
        raise ValueError("confidence levels must lie in [0, 1]")
    z = np.abs(y - mu)
    observed = []
    for c in grid:
        half = norm.ppf(0.5 + c / 2.0) * sigma
        observed.append(float(np.mean(z <= half)) if c < 1 else 1.0)
    return CalibrationCurve(grid, np.array(observed))


def mean_std(values) -> tuple[float, float | None]:
    """Mean and sample std over trials; std is absent for a single trial."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), (float(v.std(ddof=1)) if v.size >= 2 else None)


@dataclass
class BenchmarkResult:
    dataset: str
    wrapper: str
    rmse_mean: float | None = None
    rmse_std: float | None = None
    nll_mean: float | None = None
    nll_std: float | None = None
    seconds: float | None = None
    trial_seeds: list[int] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    std_convention = "sample std over trials (ddof=1)"

    @classmethod
    def from_trials(cls, dataset, wrapper, rmses, nlls, seeds, config, extra=None) -> "BenchmarkResult":
        if len(seeds) < 1:
            raise ConfigError("at least one trial is required")
        r = cls(dataset, wrapper, trial_seeds=list(seeds), config=dict(config), extra=dict(extra or {}))
        if rmses:
            r.rmse_mean, r.rmse_std = mean_std(rmses)
        if nlls:
            r.nll_mean, r.nll_std = mean_std(nlls)
        return r

    def to_dict(self, include_time: bool = False) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("seconds")
        d["std_convention"] = self.std_convention
        return d
