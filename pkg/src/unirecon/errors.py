"""Exception hierarchy shared by every subpackage.

CLI exit codes are attached to the classes so the harness can map a raised
error straight to a process status.
"""


class UniReconError(Exception):
    exit_code = 1


class InputError(UniReconError, ValueError):
    """Malformed argument: bad token id, mismatched batch, empty input."""


class DimensionError(InputError):
    """Tensor shapes are incompatible for the requested op."""


class DomainError(InputError):
    """Argument outside the mathematical domain (variance <= 0, t >= 1)."""


class ConfigError(UniReconError):
    """Invalid or inconsistent configuration."""


class DependencyError(UniReconError):
    exit_code = 2


class NumericError(UniReconError, ArithmeticError):
    """A NaN or Inf appeared in a forward or backward pass."""

    exit_code = 3


class GradCheckError(UniReconError):
    """The loss under test is not a deterministic function of the parameters."""


class AcceptanceFailure(UniReconError):
    exit_code = 4
