"""Exception types raised across the package."""


class FastmaxError(Exception):
    """Base class for all errors raised by :mod:`fastmax`."""


class DimensionError(FastmaxError, ValueError):
    """Operand shapes are incompatible or a dimension is zero."""


class ConfigError(FastmaxError, ValueError):
    """An option or combination of options is not supported."""


class NumericalInstability(FastmaxError, ArithmeticError):
    """A row normalizer fell below the safe magnitude."""

    def __init__(self, row, value):
        self.row = row
        self.value = value
        super().__init__(
            f"row {row}: attention denominator |g| = {abs(value):.3e} < 1e-12; "
            "degree-1 kernels can produce vanishing or negative row sums"
        )


class MemoryBudgetError(FastmaxError, MemoryError):
    """An explicit N x N allocation would exceed the configured byte budget."""

    def __init__(self, n, needed, budget):
        self.n = n
        self.needed = needed
        self.budget = budget
        super().__init__(f"N={n}: {needed} bytes of scores exceed budget of {budget} bytes")


class TrainingDiverged(FastmaxError, RuntimeError):
    """Loss became non-finite or blew up during training."""

    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step} (loss={loss})")
