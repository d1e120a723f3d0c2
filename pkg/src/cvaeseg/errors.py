"""Exception types shared across the library.

Every error raised on a contract violation has a named type so callers
(and the CLI exit-code mapping) can react without string matching.
"""


class CvaesegError(Exception):
    """Base class for all library errors."""


# -- tensor / layer contracts -------------------------------------------------

class ShapeMismatch(CvaesegError):
    pass


class DivisionDomain(CvaesegError):
    pass


class DomainError(CvaesegError):
    pass


class AxisOutOfRange(CvaesegError):
    pass


class EmptyInput(CvaesegError):
    pass


class NotScalar(CvaesegError):
    pass


class NoTape(CvaesegError):
    pass


class InvalidStride(CvaesegError):
    pass


class InvalidFactor(CvaesegError):
    pass


class LabelOutOfRange(CvaesegError):
    pass


class DimMismatch(CvaesegError):
    pass


class DimTooLarge(CvaesegError):
    pass


# -- model / training ---------------------------------------------------------

class MissingGradient(CvaesegError):
    pass


class MissingHRHead(CvaesegError):
    pass


class EmptyDataset(CvaesegError):
    pass


class PhaseOrderViolation(CvaesegError):
    pass


# -- persistence / data -------------------------------------------------------

class IoError(CvaesegError):
    pass


class FormatVersionMismatch(CvaesegError):
    pass


class ManifestCorrupt(CvaesegError):
    pass


class CorruptSample(CvaesegError):
    pass


class ParamOutOfRange(CvaesegError):
    pass


class ShiftOutOfRange(CvaesegError):
    pass


class InvalidGrid(CvaesegError):
    pass


class ConfigError(CvaesegError):
    """Bad run configuration (unknown key, wrong type, missing file)."""
