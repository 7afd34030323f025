"""Exception hierarchy shared by every module."""


class FSCILError(Exception):
    pass


class ConfigurationError(FSCILError, ValueError):
    """Shapes, counts or hyperparameters that cannot work together."""


class DegenerateInputError(FSCILError, ArithmeticError):
    """Input that makes an operation undefined, e.g. normalizing a zero vector."""


class DataError(FSCILError, ValueError):
    """Labels or class coverage inconsistent with the protocol."""


class ContractViolation(FSCILError, ValueError):
    pass


class FormatError(FSCILError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDivergenceError(FSCILError, RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


class ComparisonError(FSCILError, ValueError):
    pass
