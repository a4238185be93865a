"""Exception types shared across the package."""


class LexAlignError(Exception):
    """Base class for all package errors."""


class InputError(LexAlignError, ValueError):
    """An argument violates a shape, range or validity contract."""


class ConfigError(LexAlignError, ValueError):
    """A configuration value is invalid or inconsistent."""


class NumericalDomainError(LexAlignError, ArithmeticError):
    """A computation was asked to operate outside its numerical domain."""


class AnnotationParseError(LexAlignError):
    """An annotation file could not be parsed."""

    def __init__(self, path, message, offset=None):
        self.path = str(path)
        self.offset = offset
        where = f" at offset {offset}" if offset is not None else ""
        super().__init__(f"{self.path}{where}: {message}")


class EmptyCorpusError(LexAlignError):
    """Corpus construction produced no samples."""


class TrainingDivergedError(LexAlignError):
    """The training loss became non-finite."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
