"""Exception hierarchy shared by all stages.

Each class carries the CLI exit code it maps to.
"""


class AquinvError(Exception):
    exit_code = 1


class DomainError(AquinvError, ValueError):
    """Input outside the mathematical or physical domain of an operation."""

    exit_code = 2


class LayoutError(AquinvError, ValueError):
    """Shape, length or ordering mismatch between collaborating objects."""

    exit_code = 2


class ConfigError(AquinvError, ValueError):
    exit_code = 2


class SolverError(AquinvError, RuntimeError):
    """A linear or nonlinear solve did not converge."""

    exit_code = 3

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class NumericError(AquinvError, FloatingPointError):
    """NaN or Inf produced where finite values are required."""

    exit_code = 3


class MissingArtifactError(AquinvError, FileNotFoundError):
    exit_code = 4
