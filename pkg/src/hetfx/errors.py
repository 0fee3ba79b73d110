"""Exception types shared across hetfx."""


class HetfxError(Exception):
    """Base class for all hetfx errors."""


class DesignError(HetfxError, ValueError):
    """Invalid inputs for building or normalizing a design."""


class UnidentifiedError(DesignError):
    """The Gram matrix Z'Z is singular (or numerically so)."""


class InputError(HetfxError, ValueError):
    """Malformed input files or configuration."""


class NumericalError(HetfxError, ArithmeticError):
    """A numerical routine failed (non-convergence, indefinite matrix)."""


class ConvergenceError(NumericalError):
    """An iterative solver stopped before reaching its tolerance.

    Attributes
    ----------
    residual : float
        Relative residual at the last iterate.
    iterate : object
        The last iterate (solution vector, parameter vector, ...).
    """

    def __init__(self, message, residual=float("nan"), iterate=None):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual
        self.iterate = iterate


class MonteCarloError(HetfxError, RuntimeError):
    """Too many replications failed in a Monte Carlo run."""

    def __init__(self, message, failures):
        super().__init__(message)
        self.failures = failures
