"""Exceptions raised by the MCvD toolkit."""


class McvdError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(McvdError):
    """Raised when a simulation config, scenario file or command spec is invalid."""


class DegenerateCoefficientsError(McvdError):
    """Raised when a conditional success probability has a non-positive denominator."""


class TestInapplicableError(McvdError):
    """Raised when fewer than two chi-square cells remain after merging."""

    __test__ = False


class InconsistentModelError(McvdError):
    """Raised when an observed output sequence has zero probability under a model."""
