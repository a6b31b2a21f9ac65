"""
Exception types shared across vivid modules.

Value-like problems subclass ValueError and runtime failures subclass
RuntimeError, so callers can keep catching the builtin types.
"""


class VividError(Exception):
    """Base class for all vivid errors."""


class ConfigError(VividError, ValueError):
    """Invalid or inconsistent configuration."""


class ShapeError(VividError, ValueError):
    """Tensor shapes do not agree with the operation's contract."""


class DegeneratePoseError(VividError, ValueError):
    """A skeleton has zero shoulder extent or zero torso height."""


class MissingAnchorError(VividError, ValueError):
    """Required torso anchors are absent or below the confidence threshold."""


class SchemaVersionError(VividError, ValueError):
    """A file declares a schema version or kind this reader does not know."""


class CheckpointError(VividError, RuntimeError):
    """A checkpoint is missing, malformed, or incompatible with the model."""


class NonFiniteLossError(VividError, RuntimeError):
    """Training produced a NaN or infinite loss."""


class RunLockedError(VividError, RuntimeError):
    """Another live process holds the run directory lock."""
