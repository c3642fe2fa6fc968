"""Exception types raised across distillkit.

Every error also derives from a builtin (``ValueError`` or
``FloatingPointError``) so callers that only catch the builtin keep working.
"""


class DistillKitError(Exception):
    """Base class for all distillkit errors."""


class ShapeError(DistillKitError, ValueError):
    """Operands, parameters or files disagree on a shape."""


class NonFiniteError(DistillKitError, FloatingPointError):
    """A forward value, gradient or update became NaN or infinite."""

    def __init__(self, message: str, value: float = float("nan")):
        super().__init__(message)
        self.value = value

    def __reduce__(self):
        return type(self), (self.args[0], self.value)


class DomainError(DistillKitError, ValueError):
    """An argument lies outside the domain of an operation (log of 0, tau <= 0, ...)."""


class CheckpointError(DistillKitError, ValueError):
    """A checkpoint file is truncated, versioned differently, or inconsistent."""


class DataFormatError(DistillKitError, ValueError):
    """An IDX or CSV dataset file could not be parsed."""


class ConfigError(DistillKitError, ValueError):
    """An experiment configuration is inconsistent with its protocol."""


class TrainingDivergedError(DistillKitError, FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, epoch: int, batch: int, loss_kind: str, value: float):
        self.epoch = epoch
        self.batch = batch
        self.loss_kind = loss_kind
        self.value = value
        super().__init__(
            f"non-finite {loss_kind} loss ({value!r}) at epoch {epoch}, batch {batch}"
        )

    def __reduce__(self):
        return type(self), (self.epoch, self.batch, self.loss_kind, self.value)
