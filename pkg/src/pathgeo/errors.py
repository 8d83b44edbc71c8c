"""Exception types shared across the package."""


class PathGeoError(Exception):
    """Base class for all package errors."""


class InvalidArchitecture(PathGeoError):
    """Graph construction arguments do not describe a valid network."""


class NumericInputError(PathGeoError):
    """NaN or infinity encountered in parameters or inputs."""


class ContractViolation(PathGeoError):
    """An operation was called with state produced under different arguments."""


class TooManyPaths(PathGeoError):
    """Exhaustive path enumeration would exceed the configured cap."""


class FormatError(PathGeoError):
    """A serialized file does not match its expected layout."""


class InfeasibleRescaling(PathGeoError):
    """A node-wise rescaling would break weight sharing."""


class UnsupportedCombination(PathGeoError):
    """The requested option combination has no defined semantics."""


class DegenerateNormalization(PathGeoError):
    """A normalization scale evaluated to zero."""


class InsufficientData(PathGeoError):
    """The operation needs more samples than the batch provides."""


class InvalidLabel(PathGeoError):
    """A class label is outside the score range."""


class InvalidEpsilon(PathGeoError):
    """Margin quantile parameter outside (0, 1)."""


class MarginDegenerate(PathGeoError):
    """Norm/margin ratios are undefined for a non-positive margin."""


class InvalidPerturbation(PathGeoError):
    """A perturbation violates the admissibility precondition."""
