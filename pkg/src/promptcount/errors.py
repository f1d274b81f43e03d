"""Exception types shared across the package."""


class PromptCountError(Exception):
    """Base class for package errors."""


class ShapeError(PromptCountError, ValueError):
    """Tensor or array shapes do not satisfy an operation's contract."""


class ConfigError(PromptCountError, ValueError):
    """A configuration value is outside its permitted range."""


class PromptError(PromptCountError, ValueError):
    """A prompt is empty or otherwise unusable."""


class DataError(PromptCountError, ValueError):
    """A scene spec or annotation record is invalid."""


class ManifestError(DataError):
    """An annotation manifest fails schema validation."""
