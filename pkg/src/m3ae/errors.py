class ConfigError(ValueError):
    """Bad or inconsistent configuration (file, field, or checkpoint/config pairing)."""


class CheckpointIntegrityError(IOError):
    """Checkpoint bytes are truncated, padded, or fail their checksum."""


class CheckpointConfigError(ConfigError):
    """Checkpoint was written for a different model configuration."""
