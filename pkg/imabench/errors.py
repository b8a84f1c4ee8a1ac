from typing import Optional


class ImaBenchError(Exception):
    """Base class for every error raised by imabench."""


class SingularJacobian(ImaBenchError):
    def __init__(self, message: str, condition: float = float("inf"), index: Optional[int] = None):
        super().__init__(f"{message} (condition estimate {condition:.3e})")
        self.condition = condition
        self.index = index


class NonFiniteValue(ImaBenchError, ValueError):
    def __init__(self, message: str, coordinate: Optional[int] = None):
        super().__init__(message)
        self.coordinate = coordinate


class UnsupportedPrimitive(ImaBenchError, TypeError):
    pass


class ConvergenceError(ImaBenchError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class LipschitzViolation(ImaBenchError):
    def __init__(self, block_index: int, ratio: float):
        super().__init__(f"Block {block_index} has empirical Lipschitz ratio {ratio:.6f} >= 1")
        self.block_index = block_index
        self.ratio = ratio


class NonFiniteLoss(ImaBenchError):
    def __init__(self, term: str, value: float):
        super().__init__(f"Non-finite loss: term '{term}' evaluated to {value}")
        self.term = term
        self.value = value


class TrainingAborted(ImaBenchError):
    """Training stopped early; `model` holds the last valid parameters."""

    def __init__(self, cause: Exception, model, log, iteration: int):
        super().__init__(f"Training aborted at iteration {iteration}: {cause}")
        self.cause = cause
        self.model = model
        self.log = log
        self.iteration = iteration


class QuadratureError(ImaBenchError):
    pass


class ConstantColumn(ImaBenchError, ValueError):
    def __init__(self, matrix_name: str, column: int):
        super().__init__(f"Column {column} of {matrix_name} has zero rank variance")
        self.matrix_name = matrix_name
        self.column = column


class SchemaMismatch(ImaBenchError, ValueError):
    def __init__(self, missing: str, kind: str):
        super().__init__(f"CSV does not match the '{kind}' schema: missing column '{missing}'")
        self.missing = missing
        self.kind = kind


class ConfigError(ImaBenchError, ValueError):
    pass
