from typing import Optional


class LongiDesignError(Exception):
    """Base class for every error raised by the design engine."""


class DomainError(LongiDesignError, ValueError):
    """A parameter lies outside the range where a formula is defined."""


class DecompositionError(LongiDesignError):
    """A covariance or information matrix is singular or not positive definite."""


class InfiniteVarianceError(LongiDesignError):
    """The unit variance is unbounded, e.g. pe(1-pe)·s0 = 0."""


class QuadratureError(LongiDesignError):
    """Gauss-Hermite integration did not settle within the node cap."""

    def __init__(self, message: str, rel_change: float, nodes: int):
        super().__init__(f"{message} (relative change {rel_change:.3e} at {nodes} nodes)")
        self.rel_change = rel_change
        self.nodes = nodes


class UnattainableError(LongiDesignError):
    """The target power cannot be reached inside the allowed range of r."""

    def __init__(self, message: str, max_power: float, limit_variance: Optional[float] = None):
        super().__init__(f"{message}; maximum achievable power is {max_power:.4f}")
        self.max_power = max_power
        self.limit_variance = limit_variance


class ConfigError(LongiDesignError):
    """The YAML defaults file could not be parsed."""


class ScenarioError(LongiDesignError):
    """A scenario file is missing or malformed."""
