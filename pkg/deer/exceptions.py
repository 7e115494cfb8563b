class DeerError(Exception):
    """Base class for every error raised by the deer app."""


class ShapeError(DeerError, ValueError):
    pass


class NonFiniteError(DeerError, ArithmeticError):
    pass


class TrainingDivergedError(NonFiniteError):
    """A training loop produced a non-finite loss."""

    def __init__(self, stage, step, loss):
        self.stage = stage
        self.step = step
        self.loss = loss
        super().__init__(f"{stage} diverged at step {step}: loss={loss!r}")


class DelayConfigError(DeerError, ValueError):
    pass


class DelayProcessError(DeerError, RuntimeError):
    pass


class ExpertNotReadyError(DeerError, RuntimeError):
    pass


class ArtifactMissingError(DeerError, FileNotFoundError):
    """A stage needs an artifact that an earlier command produces."""

    def __init__(self, path, command):
        self.path = path
        self.command = command
        super().__init__(f"missing {path}; run `manage.py {command}` first")


class ArtifactMismatchError(DeerError, ValueError):
    pass


class EnvConfigError(DeerError, ValueError):
    pass


class DatasetError(DeerError, ValueError):
    pass


class ModelFrozenError(DeerError, RuntimeError):
    pass


class NormalizationError(DeerError, ArithmeticError):
    pass
