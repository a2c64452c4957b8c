"""Exception types shared across the package."""


class HFMFError(Exception):
    """Base class for all package errors."""


class DimensionError(HFMFError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(HFMFError, ValueError):
    """A precondition of an operation was violated."""


class ConfigurationError(HFMFError, ValueError):
    """Invalid model, corpus or run configuration."""


class DegenerateInputError(HFMFError, ValueError):
    """Input admits no well-defined answer (e.g. a single-class label set)."""


class LayoutError(HFMFError, FileNotFoundError):
    """A corpus directory does not have the expected layout."""


class FormatError(HFMFError, ValueError):
    """A file could not be decoded."""
