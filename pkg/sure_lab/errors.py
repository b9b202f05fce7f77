class SureLabError(Exception):
    """Base class for every error raised by sure_lab."""


class ShapeError(SureLabError, ValueError):
    pass


class DomainError(SureLabError, ValueError):
    pass


class ContractError(SureLabError, RuntimeError):
    pass


class ConfigError(SureLabError, ValueError):
    pass


class OptimizerError(SureLabError, RuntimeError):
    pass
