class ConfigError(ValueError):
    """A configuration field violates its contract."""


class TrainingDiverged(RuntimeError):
    """A loss became non-finite during training."""
