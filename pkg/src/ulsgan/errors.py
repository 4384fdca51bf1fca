"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class UlsganError(Exception):
    exit_code = 2


class ParameterError(UlsganError, ValueError):
    """Invalid argument value or shape."""


class PipelineError(UlsganError):
    """Signal processing could not produce a conformant record."""


class InsufficientDataError(UlsganError, ValueError):
    """Too few samples for a fit or a test."""


class DegenerateDataError(UlsganError, ValueError):
    """Data has no spread (zero variance)."""


class StructuralError(UlsganError):
    """Datasets or grids do not have the required structure."""


class ExtrapolationError(UlsganError, ValueError):
    """Query lies outside the interpolation grid."""


class UsageError(UlsganError):
    """API misuse, e.g. a backward pass with a stale forward cache."""


class TrainingDivergedError(UlsganError):
    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged (non-finite loss) at epoch {epoch}")


class PersistenceError(UlsganError):
    exit_code = 3


class CorruptionError(PersistenceError):
    """File contents do not match their declared length or checksum."""


class FormatError(PersistenceError):
    """Wrong magic bytes or unparsable header."""


class VersionError(PersistenceError):
    """Unsupported on-disk format version."""
