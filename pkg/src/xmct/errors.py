"""Exception hierarchy shared across the package."""


class XmctError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(XmctError):
    """Array dimensions do not match what an operation requires."""


class DomainError(XmctError):
    """A value is outside the mathematically valid range (non-finite, negative sigma, ...)."""


class ConfigError(XmctError):
    """Invalid configuration; the message names the offending section/field."""


class TrainingError(XmctError):
    """Training diverged. Carries the last finite parameter state."""

    def __init__(self, message, last_params=None, step=None):
        super().__init__(message)
        self.last_params = last_params
        self.step = step


class AdaptationError(XmctError):
    """Test-time weight adaptation hit a non-finite gradient at `step`."""

    def __init__(self, message, step, last_theta=None):
        super().__init__(message)
        self.step = step
        self.last_theta = last_theta


class SolverAbort(XmctError):
    """A reconstruction aborted mid-run; `state` holds the partial trace."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
