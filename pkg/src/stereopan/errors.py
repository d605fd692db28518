"""Exception types shared across the pipeline."""


class StereopanError(Exception):
    """Base class for all library errors."""


class FormatError(StereopanError, ValueError):
    """Malformed file contents (bad magic, corrupt header)."""


class UnsupportedError(StereopanError, ValueError):
    """Well-formed file outside the supported subset (dtype, byte order)."""


class ShapeError(StereopanError, ValueError):
    """Array shapes incompatible with the operation."""


class ParameterError(StereopanError, ValueError):
    """Parameter outside its admissible range."""


class DomainError(StereopanError, ValueError):
    """Input values outside the mathematical domain of the operation."""


class DegenerateDataError(StereopanError, ValueError):
    """Data insufficient to determine a unique solution."""


class CoverageError(StereopanError, ValueError):
    """Sliding windows leave part of the output uncovered."""


class CapacityError(StereopanError, ValueError):
    """Result would exceed a storage-format capacity limit."""


class MappingError(StereopanError, KeyError):
    """Label id without a corresponding matching entry."""


class ConfigurationError(StereopanError, ValueError):
    """Inconsistent run configuration (empty matching block, unknown key)."""


class SceneSpecError(StereopanError, ValueError):
    """Synthetic scene specification is geometrically inconsistent."""


class InputError(StereopanError, ValueError):
    """Missing or unpaired input files at the CLI boundary."""
