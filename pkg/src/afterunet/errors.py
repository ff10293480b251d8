"""Exception hierarchy.  ``exit_code`` is what the CLI returns for each kind."""


class AFTError(Exception):
    exit_code = 2
    kind = "error"


class ShapeError(AFTError, ValueError):
    kind = "shape"


class ConfigError(AFTError, ValueError):
    exit_code = 1
    kind = "config"


class FormatError(AFTError, ValueError):
    kind = "format"


class ConfigMismatchError(FormatError):
    kind = "config_mismatch"


class NumericError(AFTError, ArithmeticError):
    exit_code = 3
    kind = "numeric"
