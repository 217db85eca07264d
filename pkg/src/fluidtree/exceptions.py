"""Exception types raised across the package."""


class FluidTreeError(Exception):
    """Base class for all package errors."""


class ValidationError(FluidTreeError, ValueError):
    pass


class SingularFlowMatrix(FluidTreeError):
    pass


class UnstableNetwork(FluidTreeError):
    pass


class IterationLimit(FluidTreeError):
    pass


class NumericalFailure(FluidTreeError):
    pass


class EmptyingFailed(FluidTreeError):
    """The state did not drain by the end of the horizon; T is too small."""


class LpFailure(FluidTreeError):
    """The discretized LP was not solved to optimality."""


class EmptyPattern(FluidTreeError):
    pass


class OverlappingCells(FluidTreeError, ValueError):
    pass


class EmptyDataset(FluidTreeError, ValueError):
    pass


class NoApplicableTree(FluidTreeError):
    pass


class GenerationFailed(FluidTreeError):
    """Too many instances failed during dataset generation."""
