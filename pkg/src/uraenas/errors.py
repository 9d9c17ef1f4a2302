"""Exception hierarchy. CLI exit codes are attached to the classes."""


class UraeError(Exception):
    exit_code = 1


class DimensionError(UraeError, ValueError):
    exit_code = 2


class InputError(UraeError, ValueError):
    exit_code = 2


class UsageError(UraeError, ValueError):
    exit_code = 2


class ConfigError(UraeError, ValueError):
    exit_code = 2


class InvariantError(UraeError, ValueError):
    exit_code = 1


class TrainingError(UraeError, RuntimeError):
    exit_code = 1


class FormatError(UraeError, ValueError):
    exit_code = 3
