"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MassError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(MassError, ValueError):
    exit_code = 2
    kind = "config"


class DataError(MassError, ValueError):
    exit_code = 3
    kind = "data"


class NumericalError(MassError, ArithmeticError):
    exit_code = 4
    kind = "numerical"


class IncompatibleCheckpointError(ConfigError):
    """Checkpoint format version or manifest fingerprint does not match."""
