"""Exception hierarchy shared by every module.

Each error carries a ``category`` (printed as a message prefix by the CLI)
and the process exit code the CLI maps it to.
"""


class PneumoError(Exception):
    category = "error"
    exit_code = 2


class ShapeError(PneumoError, ValueError):
    category = "shape"


class ParameterError(PneumoError, ValueError):
    category = "parameter"


class StatisticsError(PneumoError, ValueError):
    category = "statistics"


class UsageError(PneumoError, ValueError):
    category = "usage"


class ConfigError(PneumoError, ValueError):
    category = "config"


class DataError(PneumoError, ValueError):
    category = "data"


class LabelError(DataError):
    category = "label"


class ParseError(DataError):
    """Malformed text input; ``line`` is 1-based when known."""

    category = "parse"

    def __init__(self, message, line=None, kind=None):
        self.line = line
        self.kind = kind
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DecodeError(DataError):
    category = "decode"


class OntologyError(ParseError):
    category = "ontology"


class CorruptCheckpointError(PneumoError):
    category = "checkpoint"
    exit_code = 3


class OutputError(PneumoError, OSError):
    category = "io"
    exit_code = 4
