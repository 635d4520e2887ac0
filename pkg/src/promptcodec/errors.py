"""Exception hierarchy shared across the codec.

Every error carries an ``exit_code`` so the command-line layer can map
failures to stable process exit statuses.
"""


class PromptCodecError(Exception):
    exit_code = 1


class ConfigError(PromptCodecError, ValueError):
    exit_code = 2


class ShapeError(PromptCodecError, ValueError):
    exit_code = 2


class DomainError(PromptCodecError, ValueError):
    exit_code = 2


class RangeError(PromptCodecError, ValueError):
    exit_code = 2


class InputError(PromptCodecError, OSError):
    """A file could not be read or written."""

    exit_code = 3


class DataError(PromptCodecError, ValueError):
    exit_code = 6


class FormatError(PromptCodecError, ValueError):
    """Malformed bitstream (bad magic, bad padding, bad lengths)."""

    exit_code = 4


class CorruptionError(FormatError):
    exit_code = 4


class TruncationError(CorruptionError):
    """Input ends before the declared fields; a special case of corruption."""

    exit_code = 4


class VersionError(FormatError):
    exit_code = 4


class DecodeError(FormatError):
    exit_code = 4


class NumericalError(PromptCodecError, ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step

    exit_code = 7


class BackendError(PromptCodecError, RuntimeError):
    exit_code = 5


class BackendTimeoutError(BackendError):
    exit_code = 5


class CapabilityError(BackendError):
    exit_code = 5
