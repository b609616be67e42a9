"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is invalid. ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class CifarFormatError(ValueError):
    """A CIFAR binary batch file is malformed."""


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite during training."""
