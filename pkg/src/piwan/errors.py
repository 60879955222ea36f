"""Exception types shared across the toolkit."""


class PiwanError(Exception):
    """Base class for all toolkit errors."""


class NonUnitQuaternion(PiwanError, ValueError):
    pass


class NonFiniteState(PiwanError, FloatingPointError):
    pass


class SimulationError(PiwanError, RuntimeError):
    """A controller or solver failure inside a rollout, tagged with its timestamp."""

    def __init__(self, t: float, cause: BaseException, tag: str = ""):
        self.t = t
        self.cause = cause
        self.tag = tag
        super().__init__(t, cause)

    def __str__(self) -> str:
        where = f" [{self.tag}]" if self.tag else ""
        return f"failure at t={self.t:.3f}s{where}: {self.cause!r}"


class UnknownKind(PiwanError, KeyError):
    pass


class NonFiniteJacobian(PiwanError, FloatingPointError):
    pass


class SolverDiverged(PiwanError, RuntimeError):
    pass


class HorizonMismatch(PiwanError, ValueError):
    pass


class RolloutTooShort(PiwanError, ValueError):
    pass


class EmptyDataset(PiwanError, ValueError):
    pass


class UnseenTrajectoryError(PiwanError, ValueError):
    """Raised when an evaluation-only trajectory leaks into a training set."""


class ShapeMismatch(PiwanError, ValueError):
    pass


class NonFiniteLoss(PiwanError, FloatingPointError):
    def __init__(self, epoch: int, msg: str = ""):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}{': ' + msg if msg else ''}")


class HistoryNotWarm(PiwanError, RuntimeError):
    pass


class EmptyReport(PiwanError, ValueError):
    pass


class FormatError(PiwanError, ValueError):
    """A dataset or checkpoint file failed header validation."""


class ConfigError(PiwanError, ValueError):
    pass
