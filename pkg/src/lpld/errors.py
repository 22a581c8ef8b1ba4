class ConfigError(ValueError):
    """Inconsistent or invalid configuration."""


class MissingInput(FileNotFoundError):
    """A manifest, checkpoint or other required input is absent."""


class InvariantViolation(RuntimeError):
    """An internal invariant was broken at run time."""


class ConfigConflict(ConfigError):
    """Inputs that are individually valid but disagree with each other."""
