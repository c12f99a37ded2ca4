"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file could not be parsed or violates its declared layout."""


class VersionMismatchError(FormatError):
    """A serialized artifact carries a version this reader does not support."""


class ConfigError(ValueError):
    """Pipeline configuration failed validation."""


class EmptyPromptError(ValueError):
    """A user prompt resolved to zero finest-scale cells."""


class NonFiniteError(FloatingPointError):
    """A numeric operation produced NaN or Inf."""
