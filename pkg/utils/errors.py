"""
Exception hierarchy shared by the simulation, compression, prediction and harness code
"""

from typing import Optional


class DDPredictError(Exception):
    """Base class for every error raised by this toolkit"""


class ArgumentError(DDPredictError, ValueError):
    """Bad argument, empty input or shape mismatch"""


class ConfigurationError(DDPredictError, ValueError):
    """Invalid configuration value; `field` names the offending dotted key"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericalError(DDPredictError, ArithmeticError):
    """Factorization failure, singular system or non-finite values"""


class UndefinedReferenceError(DDPredictError, ValueError):
    """A normalized metric was asked for against an all-zero reference"""


class TrainingError(DDPredictError, RuntimeError):
    """Training diverged"""

    def __init__(self, epoch: int, message: str):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


class FormatError(DDPredictError, ValueError):
    """Malformed dataset, basis, code or checkpoint file"""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes"""
