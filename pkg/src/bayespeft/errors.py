"""Exception hierarchy shared by every module.

Each class maps onto one failure family; the CLI turns them into exit codes
(2 for configuration/contract problems, 3 for numeric failures).
"""


class BayesPeftError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2
    kind = "error"


class ShapeError(BayesPeftError, ValueError):
    kind = "shape"


class ContractError(BayesPeftError, ValueError):
    kind = "contract"


class LabelIndexError(BayesPeftError, IndexError):
    kind = "index"


class DataError(BayesPeftError):
    kind = "data"


class FormatError(BayesPeftError):
    kind = "format"


class ConfigError(BayesPeftError):
    kind = "config"


class OracleError(BayesPeftError, ArithmeticError):
    exit_code = 3
    kind = "oracle"


class TrainingError(BayesPeftError, ArithmeticError):
    """Non-finite loss during training; ``step`` is the global step index."""

    exit_code = 3
    kind = "training"

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
