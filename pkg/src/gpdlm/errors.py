"""Exception types shared across the package.

Each class carries the process exit code used by the command line tool.
"""


class GpdlmError(Exception):
    """Base class for package errors."""

    exit_code = 1


class InputError(GpdlmError):
    """Malformed user input: bad shapes, labels outside the likelihood support,
    unparseable data files, inconsistent configuration."""

    exit_code = 2


class NumericalError(GpdlmError):
    """Numerical failure: Cholesky breakdown after jitter escalation, singular
    systems, diverging optimization."""

    exit_code = 3

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class SamplingError(GpdlmError):
    """Rejection sampling failed to produce a sample within the attempt budget."""

    exit_code = 4
