"""Exception types shared across the package."""


class RpaError(Exception):
    """Base class for all package errors."""


class InvalidShape(RpaError):
    """Tensor or layout shape violates a documented precondition."""


class InvalidDtype(RpaError):
    """Unsupported element type or bit width."""


class BoundsExceeded(RpaError):
    """Batch exceeds the static (max tokens, max sequences) bounds."""


class CorruptPageTable(RpaError):
    """Page table references a page id outside the cache."""


class CapacityError(RpaError):
    """Sequence's assigned pages cannot hold the requested tokens."""


class NumericsError(RpaError):
    """Non-finite values fed to a numeric kernel."""


class DegenerateRow(RpaError):
    """A query row finalized with zero visible keys (l == 0)."""


class MalformedTrace(RpaError):
    """Event trace violates ordering or dependency requirements."""


class MissingParameter(RpaError):
    """A required parameter for a formula or mode was not supplied."""


class ParseError(RpaError):
    """Malformed input file (CSV table, JSON profile, trace)."""


class InvalidSearchSpace(RpaError):
    """Tuner search space is empty or inconsistent."""
