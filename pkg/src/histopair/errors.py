"""Exception hierarchy shared by all pipeline stages.

Three families matter for the CLI exit-code mapping: bad inputs
(:class:`InputError`, exit 2), backend trouble (:class:`BackendError`,
exit 3), and everything else under :class:`PipelineError` (exit 4).
"""

from __future__ import annotations


class PipelineError(Exception):
    """Base class for all pipeline-raised errors."""


class InputError(PipelineError):
    """Malformed or inconsistent input data / configuration."""


class InternalError(PipelineError):
    """A pipeline invariant was violated; indicates a bug, not bad input."""


# --- corpus ---------------------------------------------------------------

class ParseError(InputError):
    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class DuplicateSlideId(InputError):
    pass


class GridOutOfRange(InputError):
    pass


class IncompleteRecord(InputError):
    pass


# --- vectors --------------------------------------------------------------

class ZeroRow(InputError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"row {index} has zero norm")


class NotNormalized(InputError):
    pass


class EmptyMatrix(InputError):
    pass


class KTooLarge(InputError):
    pass


class TotalTooLarge(InputError):
    pass


class TooFewRows(InputError):
    pass


# --- extraction -----------------------------------------------------------

class EmptyPrompts(InputError):
    pass


class AlreadyDeduped(InputError):
    pass


# --- agents ---------------------------------------------------------------

class BackendError(PipelineError):
    """A backend call failed. ``permanent`` means retrying cannot help."""

    def __init__(self, message: str, *, endpoint: str = "", permanent: bool = False,
                 attempts: int = 1):
        self.endpoint = endpoint
        self.permanent = permanent
        self.attempts = attempts
        super().__init__(message)


class EmptyResponse(BackendError):
    pass


class ShortList(BackendError):
    pass


class InvalidScript(InputError):
    pass


class DigestMismatch(InputError):
    pass


class TooShort(InputError):
    pass


# --- cliptrain ------------------------------------------------------------

class DegenerateBatch(InputError):
    pass


class NonFiniteGradient(InternalError):
    pass


class EmptySource(InputError):
    pass


# --- evaluation -----------------------------------------------------------

class ShotTooLarge(InputError):
    pass


class SingleClassSplit(InputError):
    pass


class SingleClass(InputError):
    pass
