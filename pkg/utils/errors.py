# utils/errors.py
from typing import Optional


class CovsimError(Exception):
    """Base class for every error raised by the simulator."""


class DomainError(CovsimError, ValueError):
    pass


class ScenarioError(CovsimError):
    """Scenario document failed schema or cross-reference validation."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class EncodeError(CovsimError):
    pass


class DecodeError(CovsimError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericalError(CovsimError):
    pass


class HarnessError(CovsimError):
    """Wraps a stage failure with the step index and the module that failed."""

    def __init__(self, step: int, module: str, cause: Optional[BaseException] = None):
        self.step = step
        self.module = module
        self.cause = cause
        super().__init__(f"step {step}, module {module}: {cause}")
