"""Exception hierarchy shared by the pipeline stages.

The CLI maps these onto exit codes: usage problems exit 1, data or format
problems exit 2, capacity problems exit 3.
"""


class EEGForestError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgumentError(EEGForestError, ValueError):
    pass


class DataFormatError(EEGForestError, ValueError):
    """Malformed corpus file, feature table or label arity."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class CapacityError(EEGForestError, OverflowError):
    """A tree does not fit the 8/16-bit fields of the compact encoding."""

    def __init__(self, message, limit=None):
        self.limit = limit
        super().__init__(message)


class CorruptionError(EEGForestError, ValueError):
    """A compact tree violates its structural invariants."""


class CompactFormatError(EEGForestError, ValueError):
    """Base class for `.ctf` decoding failures."""


class BadMagicError(CompactFormatError):
    pass


class VersionMismatchError(CompactFormatError):
    pass


class TruncatedError(CompactFormatError):
    pass


class SizeMismatchError(CompactFormatError):
    pass
