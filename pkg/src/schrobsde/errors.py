"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class SchroBsdeError(Exception):
    exit_code = 1


class InvalidInputError(SchroBsdeError, ValueError):
    """Bad shapes, out-of-range settings, unknown names."""

    exit_code = 1


class UnsupportedOperationError(SchroBsdeError):
    """Requested quantity is not available for this problem (e.g. no exact solution)."""

    exit_code = 1


class CheckpointMissingError(SchroBsdeError, FileNotFoundError):
    exit_code = 2


class TrainingDivergenceError(SchroBsdeError, ArithmeticError):
    """Loss became NaN/Inf or exploded while training one time step."""

    exit_code = 3

    def __init__(self, step: int, epoch: int, loss: float):
        super().__init__(f"training diverged at step j={step}, epoch {epoch} (loss={loss!r})")
        self.step = step
        self.epoch = epoch
        self.loss = loss


class OutputUnwritableError(SchroBsdeError, OSError):
    exit_code = 4


class ContractionFailureError(SchroBsdeError, ArithmeticError):
    """Fixed-point iteration did not converge within its budget."""

    exit_code = 5

    def __init__(self, step: int, iterations: int, lipschitz_dt: float):
        super().__init__(
            f"fixed point at step j={step} not converged after {iterations} iterations "
            f"(estimated L*dt = {lipschitz_dt:.3g})"
        )
        self.step = step
        self.iterations = iterations
        self.lipschitz_dt = lipschitz_dt


class RegressionDegenerateError(SchroBsdeError, ArithmeticError):
    exit_code = 5


class StaleTapeError(SchroBsdeError, RuntimeError):
    """A forward tape was used after its parameters changed."""

    exit_code = 1
