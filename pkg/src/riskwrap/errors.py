"""Exception hierarchy shared by every riskwrap module."""


class RiskwrapError(Exception):
    """Base class for all riskwrap errors."""


class AutodiffError(RiskwrapError):
    """Misuse of the gradient tape (non-scalar loss, untaped tensor, missing grads)."""


class ShapeError(RiskwrapError, ValueError):
    pass


class NonFiniteError(RiskwrapError, FloatingPointError):
    pass


class ConfigError(RiskwrapError, ValueError):
    """Invalid user configuration. CLI exit code 2."""


class DataError(RiskwrapError, ValueError):
    """Unreadable, malformed or missing data. CLI exit code 3."""


class DivergenceError(RiskwrapError):
    """A training loss became non-finite. CLI exit code 4."""

    def __init__(self, message, *, epoch=None, batch=None, metric=None, member=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.metric = metric
        self.member = member


class IncompatibleMetricError(RiskwrapError, ValueError):
    pass


class UnsupportedLayerError(RiskwrapError, ValueError):
    pass


class UntrainedModelError(RiskwrapError):
    pass


class DegenerateDimensionWarning(UserWarning):
    """A latent dimension was constant during density fitting and has been dropped."""
