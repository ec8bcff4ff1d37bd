"""Exception hierarchy shared by every deltaplug module."""


class DeltaPlugError(Exception):
    pass


class DimensionError(DeltaPlugError, ValueError):
    pass


class ContractError(DeltaPlugError, RuntimeError):
    pass


class TokenIndexError(DeltaPlugError, IndexError):
    """An id or label fell outside its valid range; ``value`` carries it."""

    def __init__(self, message, value):
        super().__init__(message)
        self.value = value


class NotFoundError(DeltaPlugError, KeyError):
    def __init__(self, path, prefix):
        super().__init__(f"no sub-module at {path!r}; longest resolvable prefix is {prefix!r}")
        self.path = path
        self.prefix = prefix

    def __str__(self):
        return self.args[0]


class ShapeError(DeltaPlugError, ValueError):
    pass


class StrictLoadError(DeltaPlugError, KeyError):
    def __str__(self):
        return self.args[0]


class PatternError(DeltaPlugError, ValueError):
    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class RoutingError(DeltaPlugError, RuntimeError):
    pass


class NotAttachedError(DeltaPlugError, LookupError):
    pass


class CaptureError(DeltaPlugError, RuntimeError):
    pass


class InitError(DeltaPlugError, RuntimeError):
    pass


class EmptyMatchError(DeltaPlugError, LookupError):
    pass


class PlacementError(DeltaPlugError, ValueError):
    pass


class StateError(DeltaPlugError, RuntimeError):
    pass


class ConfigError(DeltaPlugError, ValueError):
    pass


class FormatError(DeltaPlugError, ValueError):
    pass


class MissingConfigError(DeltaPlugError, FileNotFoundError):
    pass
