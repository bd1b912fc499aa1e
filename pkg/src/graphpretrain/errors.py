"""Exception hierarchy shared across the package.

Each error class carries the process exit code the CLI maps it to.
"""


class GraphPretrainError(Exception):
    exit_code = 1


class ConfigError(GraphPretrainError, ValueError):
    exit_code = 2


class DataError(GraphPretrainError, ValueError):
    exit_code = 3

    def __init__(self, message, *, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)


class EmptyGraphError(DataError):
    pass


class ShapeError(GraphPretrainError, ValueError):
    exit_code = 4


class NumericalFault(GraphPretrainError, ArithmeticError):
    exit_code = 4
