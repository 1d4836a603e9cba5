"""Exception hierarchy shared by every subpackage.

The CLI maps these onto exit codes: data-side problems exit with 2, numeric
failures with 3.
"""


class HiddenCutError(Exception):
    """Base class for all package errors."""


class ShapeError(HiddenCutError, ValueError):
    pass


class DegenerateMaskError(HiddenCutError, ValueError):
    pass


class DegenerateInputError(HiddenCutError, ValueError):
    pass


class NumericError(HiddenCutError, ArithmeticError):
    pass


class ContractError(HiddenCutError, ValueError):
    pass


class ConfigError(HiddenCutError, ValueError):
    pass


class DataError(HiddenCutError, ValueError):
    pass


class VocabError(DataError, IndexError):
    pass


class LabelError(DataError, IndexError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SpecError(DataError):
    pass


class FormatError(DataError):
    """Checkpoint magic, version or header is not what we expect."""


class CorruptionError(FormatError):
    """Checkpoint payload is truncated or inconsistent with its manifest."""


class ValidationError(FormatError):
    pass
