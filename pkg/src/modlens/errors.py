"""Exception hierarchy shared by the library and the CLI (which maps them to exit codes)."""


class ModlensError(Exception):
    pass


class ConfigError(ModlensError, ValueError):
    """Invalid configuration or usage. CLI exit code 2."""


class DataFormatError(ModlensError, ValueError):
    """On-disk data does not match its header or violates a sample invariant."""


class TrainingDivergedError(ModlensError, RuntimeError):
    """Loss became non-finite during training."""
