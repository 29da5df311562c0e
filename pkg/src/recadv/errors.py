"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ShapeError(ValueError):
    """Array shape incompatible with the requested operation."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written with an unsupported format version."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint payload is truncated or fails its checksum."""
