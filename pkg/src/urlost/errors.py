"""Exception types raised across the pipeline."""


class UrlostError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(UrlostError, ValueError):
    """An argument violates a documented precondition."""


class ShapeMismatchError(InvalidArgumentError):
    """Array shapes are inconsistent with each other or with the config."""


class ValueRangeError(InvalidArgumentError):
    """A value falls outside its documented range."""


class InvalidConfigError(UrlostError):
    """A configuration file or section is malformed or self-contradictory."""


class MalformedFileError(UrlostError):
    """A binary file does not match its expected layout."""


class CorruptRecordError(MalformedFileError):
    """A record inside an otherwise well-formed file is invalid."""


class InvalidLatticeError(UrlostError):
    """A sampling lattice is unusable for the given image geometry."""


class DegenerateNodeError(UrlostError):
    """A signal dimension has no affinity mass where the math requires some."""


class IsolatedDimensionError(UrlostError):
    """A dimension with zero affinity row sum blocks Laplacian construction."""


class NumericError(UrlostError):
    """A numeric routine failed to converge or produced non-finite values."""


class InvalidSplitError(UrlostError):
    """A train/test split is unusable (e.g. a class missing from training)."""


class StaleArtifactError(UrlostError):
    """A pipeline stage received inputs whose hashes do not match provenance."""
