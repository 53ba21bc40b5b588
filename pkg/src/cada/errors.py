"""Shared exception types."""


class InvalidInput(ValueError):
    """Arguments violate an operation's preconditions."""


class SimulationDiverged(RuntimeError):
    """A PDE integration produced non-finite or runaway values."""

    def __init__(self, step, max_abs):
        self.step = step
        self.max_abs = max_abs
        super().__init__(f"simulation diverged at step {step} (max |u| = {max_abs:.3e})")


class NumericalError(RuntimeError):
    """A numerical routine produced non-finite values."""
