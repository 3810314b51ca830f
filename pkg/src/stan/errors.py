"""Exception types raised across the package."""


class StanError(Exception):
    pass


class ShapeError(StanError, ValueError):
    pass


class NumericError(StanError, ArithmeticError):
    pass


class ModeError(StanError, ValueError):
    pass


class SingularityError(NumericError):
    pass


class ConfigError(StanError, ValueError):
    pass


class StateError(StanError, RuntimeError):
    pass


class TrainingError(NumericError):
    """Loss or parameters went non-finite during optimization."""


class SpecError(ConfigError):
    """A synthetic dataset spec cannot be satisfied (e.g. rejection budget)."""


class ParseError(ConfigError):
    pass


class PrecisionError(ConfigError):
    pass
