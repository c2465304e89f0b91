"""Exception types shared across the package."""


class MPMError(Exception):
    """Base class for solver errors."""


class NumericalError(MPMError):
    """Simulation produced an unusable state (exit code 3 from the CLI)."""


class OutOfDomainError(NumericalError):
    def __init__(self, index, position=None):
        self.index = int(index)
        self.position = position
        msg = f"particle {self.index} left the valid grid interior"
        if position is not None:
            msg += f" (x = {list(map(float, position))})"
        super().__init__(msg)


class TimeStepTooLargeError(NumericalError):
    def __init__(self, index, jacobian):
        self.index = int(index)
        super().__init__(
            f"catastrophic compression at particle {self.index}: 1 + tr(dd) = {jacobian:.3e} <= 0; "
            "reduce the time step"
        )


class NaNDetectedError(NumericalError):
    def __init__(self, step, field):
        self.step = step
        self.field = field
        super().__init__(f"non-finite values in particle field '{field}' after step {step}")


class CheckpointMismatchError(MPMError):
    """Replayed forward state disagrees with the state recorded in the forward pass."""


class ValidationError(MPMError):
    """Invalid configuration (exit code 2 from the CLI)."""


class CFLViolationError(ValidationError):
    def __init__(self, courant):
        self.courant = courant
        super().__init__(f"Courant number {courant:.4g} > 1; refusing to run (use --force to override)")


class DivergenceError(NumericalError):
    def __init__(self, epoch, loss, history=None):
        self.epoch = epoch
        self.history = history
        super().__init__(f"optimization diverged at epoch {epoch} (loss = {loss:.4g})")


class GradientNaNError(NumericalError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"non-finite gradient at epoch {epoch}; aborting optimization")
