"""Exception types shared across the package."""


class PlsgdError(Exception):
    """Base class for all package errors."""


class ProblemError(PlsgdError):
    """Invalid problem construction (bad spectrum, bad data, bad parameters)."""


class BatchError(PlsgdError):
    """Invalid minibatch request (e.g. batch larger than the dataset)."""


class QuadratureError(PlsgdError):
    """Mollifier quadrature failed to reach the requested accuracy."""


class NumericError(PlsgdError):
    """Non-finite values where finite ones are required."""


class ScheduleError(PlsgdError):
    """Invalid step-size schedule parameters."""


class DivergenceError(PlsgdError):
    """A run exceeded the divergence threshold.

    Attributes:
        last_t: step at which the threshold was crossed.
        gap: offending optimality gap (max across trials for ensembles).
        trials: diverged trial ids, when known.
    """

    def __init__(self, last_t, gap, trials=()):
        self.last_t = int(last_t)
        self.gap = float(gap)
        self.trials = tuple(trials)
        msg = f"divergence at t={self.last_t}: gap={self.gap:.3e}"
        if self.trials:
            msg += f" (trials {list(self.trials[:10])}{'...' if len(self.trials) > 10 else ''})"
        super().__init__(msg)


class ConfigError(PlsgdError):
    """Config file failed validation; `key` names the offending entry."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class CheckFailure(PlsgdError):
    """A named property check failed; raised by the fast check suite."""
