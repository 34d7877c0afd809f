"""Compose several metrics over one shared backbone and combine their risks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IncompatibleMetricError
from .wrapper import Metric, RiskAwareModel, metric_from_dict, wrap

ARRANGEMENTS = ("series", "parallel")
RULES = ("weighted_variance_sum", "mixture_of_normals", "report_separately")
SAMPLING_OUTER = ("ensemble", "dropout")
DETERMINISTIC_INNER = ("mve", "vae")
VARIANCE_METRICS = ("mve", "dropout", "ensemble", "vae")


@dataclass
class CompositionPlan:
    members: list[Metric]
    arrangement: str = "parallel"
    combination: str | None = None
    weights: list[float] | None = None
    _resolved: str = field(default="", init=False, repr=False)

    def __post_init__(self):
        if self.arrangement not in ARRANGEMENTS:
            raise ConfigError(f"arrangement must be one of {ARRANGEMENTS}")
        if not self.members:
            raise ConfigError("a composition needs at least one member")
        if self.combination is not None and self.combination not in RULES:
            raise ConfigError(f"combination must be one of {RULES}")
        if self.weights is not None:
            if len(self.weights) != len(self.members):
                raise ConfigError("one weight per member is required")
            if any(w < 0 for w in self.weights):
                raise ConfigError("combination weights must be >= 0")
            if self.combination == "weighted_variance_sum" and not any(w > 0 for w in self.weights):
                raise ConfigError("at least one combination weight must be positive")

    @property
    def identifier(self) -> str:
        return "+".join(m.name for m in self.members)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.members]

    def rule(self) -> str:
        if self.combination is not None:
            return self.combination
        names = set(self.names)
        if self.arrangement == "series" and "mve" in names:
            return "mixture_of_normals"
        return "weighted_variance_sum"

    def member_weights(self) -> list[float]:
        return list(self.weights) if self.weights is not None else [1.0] * len(self.members)

    def to_dict(self) -> dict:
        return {
            "members": [{"name": m.name, "config": m.config_dict()} for m in self.members],
            "arrangement": self.arrangement,
            "combination": self.combination,
            "weights": self.weights,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompositionPlan":
        return cls([metric_from_dict(m) for m in d["members"]], d["arrangement"], d["combination"], d["weights"])


def _check_series(plan: CompositionPlan) -> None:
    if len(plan.members) != 2:
        raise IncompatibleMetricError("series composition nests exactly two metrics (outer, inner)")
    outer, inner = plan.members
    if outer.name not in SAMPLING_OUTER or inner.name not in DETERMINISTIC_INNER:
        raise IncompatibleMetricError(
            f"cannot nest {inner.name!r} inside {outer.name!r}: series needs a sampling metric "
            f"({', '.join(SAMPLING_OUTER)}) outside a deterministic one ({', '.join(DETERMINISTIC_INNER)})"
        )


def compose(model, plan: CompositionPlan, split_index=None, seed: int = 0) -> RiskAwareModel:
    """Attach every plan member to one shared extractor."""
    if len(plan.members) == 1:
        return wrap(model, plan.members, split_index=split_index, seed=seed)
    if plan.arrangement == "series":
        _check_series(plan)
        outer, inner = plan.members
        if outer.name == "ensemble":
            from .epistemic import Ensemble

            nested = Ensemble(N=outer.N, member_seeds=outer.member_seeds, inner=(inner,))
            g = wrap(model, [nested], split_index=split_index, seed=seed)
        else:
            g = wrap(model, [outer, inner], split_index=split_index, seed=seed)
    else:
        g = wrap(model, plan.members, split_index=split_index, seed=seed)
    g.plan = plan
    return g


def joint_train_step(g: RiskAwareModel, xb, yb, opt, rng) -> dict[str, float]:
    """Accumulate each loss term's gradient on the backbone, then step once."""
    return g.joint_train_step(xb, yb, opt, rng)


# --------------------------------------------------------------- combination
def mixture_of_normals(mus, sigmas) -> tuple[np.ndarray, np.ndarray]:
    """Moments of an equal-weight mixture of ``N(mu_i, sigma_i^2)`` over axis 0."""
    mus = np.asarray(mus, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    mean = mus.mean(axis=0)
    # algebraically (1/N) sum(sigma^2 + mu^2) - mean^2, without the cancellation
    var = (sigmas**2).mean(axis=0) + ((mus - mean) ** 2).mean(axis=0)
    return mean, var


def _per_sample(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v if v.ndim == 1 else v.reshape(len(v), -1).mean(axis=1)


def combine_scores(plan: CompositionPlan, scores: dict) -> dict | np.ndarray | tuple:
    """Combine per-member scores according to the plan's rule.

    ``weighted_variance_sum`` expects ``{name: variance}``;
    ``mixture_of_normals`` expects ``{"mu": [N, ...], "sigma": [N, ...]}``
    or ``{name: (mu, sigma)}`` per member; ``report_separately`` passes
    the map through.
    """
    rule = plan.rule()
    if rule == "mixture_of_normals" and "mu" in scores and "sigma" in scores:
        return mixture_of_normals(scores["mu"], scores["sigma"])
    missing = [n for n in plan.names if n not in scores]
    if missing:
        raise ConfigError(f"scores missing for plan members {missing}")
    if rule == "report_separately":
        return {n: scores[n] for n in plan.names}
    if rule == "mixture_of_normals":
        pairs = [scores[n] for n in plan.names]
        return mixture_of_normals([p[0] for p in pairs], [p[1] for p in pairs])
    weights = np.asarray(plan.member_weights(), dtype=np.float64)
    stacked = [np.asarray(scores[n], dtype=np.float64) for n in plan.names]
    if len({s.shape for s in stacked}) > 1:
        stacked = [_per_sample(s) for s in stacked]
    total = sum(w * s for w, s in zip(weights, stacked))
    return total / weights.sum()


def apply_plan(g: RiskAwareModel, scores: dict, risks: dict, details: dict, metadata: dict) -> None:
    """Add the plan's combined risk to a prediction's outputs (called by predict_with_risk)."""
    plan = g.plan
    rule = plan.rule()
    metadata["composition"] = {"identifier": plan.identifier, "arrangement": plan.arrangement, "rule": rule}
    if rule == "report_separately":
        return
    if plan.arrangement == "series":
        outer, inner = plan.names
        s = scores[outer]
        if inner == "mve" and "samples_sigma" in s:
            mean, var = mixture_of_normals(s["samples_mu"], s["samples_sigma"])
        elif inner == "vae" and "samples_recon" in s:
            # each run is a normal centred on its prediction with the reconstruction error as variance
            samples = s["samples_mu"]
            mus = samples.reshape(samples.shape[0], samples.shape[1], -1).mean(axis=2)
            mean, var = mixture_of_normals(mus, np.sqrt(s["samples_recon"]))
        else:
            raise IncompatibleMetricError(f"series plan {plan.identifier} produced no nested samples")
        risks[plan.identifier] = var
        details[f"{plan.identifier}.mean"] = mean
        return
    if rule == "mixture_of_normals":
        raise IncompatibleMetricError("mixture_of_normals needs a series plan with an mve inner metric")
    # only variance-type risks are summed; density-based bias scores are reported alone
    variances, weights = {}, []
    for name, w in zip(plan.names, plan.member_weights()):
        if name not in VARIANCE_METRICS:
            continue
        variances[name] = scores[name]["sigma"] ** 2 if name == "mve" else risks[name]
        weights.append(w)
    if len(variances) < 2 or not any(w > 0 for w in weights):
        return
    sub = CompositionPlan([m for m in plan.members if m.name in variances], "parallel",
                          "weighted_variance_sum", weights)
    risks[plan.identifier] = combine_scores(sub, variances)
    metadata["composition"]["combined"] = sub.names
