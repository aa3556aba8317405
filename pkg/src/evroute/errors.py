"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Value outside the domain of an operation (log of <= 0, empty reduction)."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class FormatError(ValueError):
    """Malformed tensor or checkpoint file."""


class LoadError(RuntimeError):
    """A dataset or checkpoint could not be loaded."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss.

    ``checkpoint`` holds the last state whose loss was finite.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
