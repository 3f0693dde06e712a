"""Exception hierarchy shared across the package.

Each category maps to a distinct CLI exit code (see ``petaug.cli``).
"""


class PetAugError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PetAugError, ValueError):
    """Inconsistent model, adapter, or experiment configuration."""


class InputError(PetAugError, ValueError):
    """An argument violates an operation's precondition."""


class DataError(PetAugError, ValueError):
    """Malformed or inconsistent dataset contents."""


class ParseError(DataError):
    """A JSONL row could not be parsed; carries the 1-based line number."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StateError(PetAugError, RuntimeError):
    """Operation called on an object in the wrong state."""


class AugmentationError(PetAugError, RuntimeError):
    """Augmentation failed; ``language`` is set for back-translation failures."""

    def __init__(self, message, language=None, cause=None):
        self.language = language
        self.cause = cause
        super().__init__(message)


class TrainingError(PetAugError, RuntimeError):
    """Training diverged or could not proceed."""

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class ExportError(PetAugError, OSError):
    pass


class ReportError(PetAugError, RuntimeError):
    pass


class AnalysisError(PetAugError, RuntimeError):
    pass
