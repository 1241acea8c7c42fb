"""Exception hierarchy. The CLI maps each family onto an exit code."""


class GatedFusionError(Exception):
    pass


class ConfigError(GatedFusionError, ValueError):
    pass


class DataError(GatedFusionError, ValueError):
    pass


class FormatError(DataError):
    """Unrecognised or malformed input file."""


class DimensionMismatchError(DataError):
    pass


class JoinError(DataError):
    """Row ids do not line up between input files."""


class NonFiniteError(DataError):
    pass


class NoDominantClusterError(DataError):
    pass


class TrainingError(GatedFusionError, ValueError):
    pass
