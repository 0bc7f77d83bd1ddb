"""Exception hierarchy shared by every module.

Each class carries a short machine-readable ``code`` used by the CLI when it
reports a failure on a single line.
"""


class NFAError(Exception):
    code = "ERROR"


class ParameterError(NFAError, ValueError):
    code = "PARAMETER"


class DomainError(NFAError, ValueError):
    code = "DOMAIN"


class NumericalError(NFAError, ArithmeticError):
    code = "NUMERICAL"


class FormatError(NFAError):
    code = "FORMAT"


class UnsupportedVersionError(FormatError):
    code = "UNSUPPORTED_VERSION"


class DataLoadError(NFAError):
    code = "LOAD"


class ConfigError(NFAError):
    code = "CONFIG"


class TrainingDivergedError(NFAError):
    code = "DIVERGED"
