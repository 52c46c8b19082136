"""Exception hierarchy shared by every stage.

The CLI maps these onto its exit codes, so stages should raise the most
specific subclass they can.
"""


class FeastError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ConfigError(FeastError):
    exit_code = 2


class InputError(FeastError):
    """Bad or missing input data (files, CSV rows, ids)."""

    exit_code = 3


class ParseError(InputError):
    def __init__(self, message, row=None, path=None):
        self.row = row
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class CornerSelectionError(InputError):
    pass


class NumericalError(FeastError):
    """Non-finite values, singular systems and other numerical breakdowns."""

    exit_code = 4


class SingularSystemError(NumericalError):
    pass
