"""Package-level exception types."""


class ConfigurationError(ValueError):
    """Invalid configuration value or combination."""


class DatasetError(RuntimeError):
    """Dataset missing, empty, or inconsistent with its manifest."""


class CheckpointIntegrityError(RuntimeError):
    """Checkpoint file is corrupt (checksum or container mismatch)."""


class CheckpointConfigMismatch(RuntimeError):
    """Checkpoint was produced under a different configuration."""


class NumericalDivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
