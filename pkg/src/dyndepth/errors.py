"""Exception types shared across the package."""


class DynDepthError(Exception):
    """Base class for all package errors."""


class ShapeError(DynDepthError):
    """Operand shapes are incompatible."""


class NonFiniteError(DynDepthError):
    """A tensor would contain NaN or Inf."""


class ContractError(DynDepthError):
    """An operation was called outside its contract."""


class DegenerateInputError(DynDepthError):
    """Input is structurally empty (e.g. zero valid frames)."""


class ConfigError(DynDepthError):
    """Invalid configuration values."""


class InfeasibleAlignmentError(DynDepthError):
    """Target sequence cannot be aligned within the available frames."""


class TrainingDivergedError(DynDepthError):
    """Loss became non-finite during training."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
