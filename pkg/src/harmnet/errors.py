"""Exception hierarchy. Messages name the offending module/value."""


class HarmnetError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(HarmnetError, ValueError):
    pass


class ParameterError(HarmnetError, ValueError):
    pass


class ContractError(HarmnetError, ValueError):
    pass


class ConfigError(HarmnetError, ValueError):
    pass


class DataError(HarmnetError, ValueError):
    pass


class InputError(HarmnetError, ValueError):
    pass


class StateError(HarmnetError, RuntimeError):
    pass


class UndefinedMetricError(HarmnetError, ValueError):
    pass


class IncompatibleModelError(HarmnetError, ValueError):
    """Checkpoint and vocabulary/dataset do not belong together."""
