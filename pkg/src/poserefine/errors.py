"""Exception types raised across the package."""


class PoseRefineError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PoseRefineError, ValueError):
    pass


class DegenerateInputError(PoseRefineError, ValueError):
    """Input too far from the manifold an operation expects."""


class ShapeError(PoseRefineError, ValueError):
    pass


class NumericDegeneracyError(PoseRefineError, ArithmeticError):
    pass


class TrainingDivergenceError(PoseRefineError, RuntimeError):
    pass


class InsufficientSamplesError(PoseRefineError, ValueError):
    pass


class CheckpointError(PoseRefineError, ValueError):
    pass
