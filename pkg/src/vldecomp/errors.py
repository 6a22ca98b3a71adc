"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``vldecomp.cli``).
"""


class VLDecompError(Exception):
    """Base class for all package errors."""


class ContractError(VLDecompError, ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(VLDecompError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataFormatError(VLDecompError, ValueError):
    """A dataset, index or checkpoint file is malformed."""


class DivergenceError(VLDecompError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch
