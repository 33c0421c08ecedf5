"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see ``gmldm.cli``).
"""


class GMLDMError(Exception):
    exit_code = 1


class ValidationError(GMLDMError, ValueError):
    exit_code = 2


class ConfigError(ValidationError):
    exit_code = 3


class FormatError(GMLDMError, ValueError):
    exit_code = 4


class TruncatedFileError(FormatError):
    pass


class UnknownVersionError(FormatError):
    pass


class MissingArtifactError(GMLDMError, FileNotFoundError):
    exit_code = 5


class NonFiniteError(GMLDMError, FloatingPointError):
    exit_code = 6


class OutputExistsError(GMLDMError, FileExistsError):
    exit_code = 7
