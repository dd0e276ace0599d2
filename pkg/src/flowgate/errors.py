"""Exception hierarchy shared by every flowgate module."""


class FlowgateError(Exception):
    """Base class for all flowgate errors."""

    exit_code = 1


class DimensionError(FlowgateError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""

    exit_code = 2


class ContractError(FlowgateError, ValueError):
    """A documented precondition was violated by the caller."""

    exit_code = 2


class SingularMatrixError(FlowgateError, ArithmeticError):
    """A mixing kernel has (numerically) zero determinant."""

    exit_code = 4


class NumericError(FlowgateError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    exit_code = 4


class CheckpointError(FlowgateError):
    """A checkpoint or tensor file is malformed, truncated or incompatible."""

    exit_code = 3


class DataError(FlowgateError):
    """Input images or manifests are invalid."""

    exit_code = 3


class EvaluationError(FlowgateError, ValueError):
    """Scores/labels cannot produce a valid ROC analysis."""

    exit_code = 3
