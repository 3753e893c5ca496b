"""Exception hierarchy. Each class carries a short code used by the CLI error prefix."""


class VSRError(Exception):
    code = "E_GENERIC"


class ConfigError(VSRError, ValueError):
    code = "E_CONFIG"


class DimensionError(VSRError, ValueError):
    code = "E_DIM"


class FormatError(VSRError):
    code = "E_FORMAT"


class UsageError(VSRError):
    code = "E_USAGE"


class TrainingError(VSRError, RuntimeError):
    code = "E_TRAIN"


class FrozenGroupDrift(TrainingError, AssertionError):
    code = "E_FROZEN_DRIFT"
