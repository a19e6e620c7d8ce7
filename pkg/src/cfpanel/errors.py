"""Exception types shared across the package.

The CLI maps each family to an exit code: configuration problems exit 1,
data problems exit 2, numerical failures exit 3.
"""


class ConfigError(ValueError):
    """Invalid run configuration or model specification."""


class PanelDataError(ValueError):
    """Input data violates a structural requirement (balance, types, ...)."""


class NumericalError(RuntimeError):
    """An estimator failed numerically (rank, convergence, singularity)."""


class CollinearityError(NumericalError):
    """Regressors are linearly dependent after the within transformation."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class ConvergenceError(NumericalError):
    """Iterative optimizer did not reach the convergence criterion."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class SeparationError(NumericalError):
    """Likelihood increases without bound along some coefficient direction."""
