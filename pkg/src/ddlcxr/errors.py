"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DdlCxrError(Exception):
    exit_code = 1


class ConfigError(DdlCxrError):
    exit_code = 2


class DataError(DdlCxrError):
    exit_code = 3


class NumericalError(DdlCxrError):
    exit_code = 4
