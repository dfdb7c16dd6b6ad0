"""Exception types raised across the package."""


class ConditioningError(ValueError):
    """A matrix that must be SPD (or nonsingular) is not, even after jitter."""


class SingularMatrixError(ConditioningError):
    """Smallest singular value is below the machine-scaled threshold."""


class FlowError(RuntimeError):
    """A pseudo-time flow failed at a given step.

    ``step`` is the 1-based pseudo-time index. ``index`` optionally identifies
    the failing unit (e.g. a ``(component, measurement)`` pair).
    """

    def __init__(self, message, step=None, index=None):
        self.step = step
        self.index = index
        parts = [message]
        if step is not None:
            parts.append(f"step={step}")
        if index is not None:
            parts.append(f"index={index}")
        super().__init__(" ".join(parts))


class DegenerateWeightsError(RuntimeError):
    """All importance weights underflowed to zero."""


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")
