"""Exception classes shared across the package.

The CLI maps these onto distinct exit codes (see cli.EXIT_CODES), so new
error conditions should reuse or subclass one of the families below
rather than raising bare ValueError.
"""


class CnnfError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CnnfError):
    """Bad run configuration (unknown key, unparsable value, bad combination)."""


class ShapeError(CnnfError):
    """Tensor dimensions do not satisfy an operation's contract."""


class InvalidArgumentError(CnnfError):
    """A scalar argument is outside its legal range."""


class LabelError(CnnfError):
    """A class label is unknown or out of range."""


class StructureError(CnnfError):
    """A network is missing a layer the operation requires."""


class UnknownLayerError(CnnfError):
    """A layer name does not exist in the network."""


class StateError(CnnfError):
    """Operation called out of order (e.g. backward without a cached forward)."""


class DegenerateVarianceError(CnnfError):
    """Batch statistics requested over fewer than two elements."""


class DataError(CnnfError):
    """Dataset-level problem (empty set, unknown class directory, ...)."""


class InvalidImageError(DataError):
    """An image cannot be decoded or has degenerate dimensions."""


class BalanceError(DataError):
    """Class balancing is impossible (a required class has no samples)."""


class DivergenceError(CnnfError):
    """Training produced a non-finite loss; message carries epoch/batch."""


class FormatError(CnnfError):
    """A serialized artifact (checkpoint, CSV) cannot be parsed."""


class BadMagicError(FormatError):
    """Checkpoint file does not start with the expected magic bytes."""


class VersionError(FormatError):
    """Checkpoint was written by an unknown future format version."""


class TruncationError(FormatError):
    """Checkpoint ends before a complete record could be read."""


class DuplicateNameError(FormatError):
    """Two records in one checkpoint share a name."""


class RecordSizeError(FormatError):
    """A record's declared dims disagree with the bytes present."""


class WeightImportError(CnnfError):
    """Pretrained import failed (strict-mode miss or shape conflict)."""


class PrecisionMismatchError(WeightImportError):
    """A record's element width differs from the run's element width."""
