"""Exception types.

Every error carries a short machine-readable ``code`` (e.g. ``"moment-infinite"``)
so the CLI can map failures onto exit codes without string matching.
"""


class WFLabError(Exception):
    code = "error"

    def __init__(self, code=None, message=None, **details):
        if code is not None:
            self.code = code
        self.details = details
        super().__init__(message or self.code)


class ParameterError(WFLabError, ValueError):
    """Invalid inputs: parameters out of domain, malformed grids, bad paths."""

    code = "invalid-parameters"


class NumericalError(WFLabError, ArithmeticError):
    """A numerical procedure failed or detected a divergent quantity."""

    code = "numerical-failure"


class DivergenceError(NumericalError):
    code = "divergent-integral"


class QuadratureBudgetExceeded(NumericalError):
    """Raised when adaptive quadrature runs out of evaluations.

    The best available estimate is attached as ``value`` / ``abs_error``.
    """

    code = "quadrature-budget-exceeded"

    def __init__(self, value, abs_error, evaluations):
        self.value = value
        self.abs_error = abs_error
        self.evaluations = evaluations
        super().__init__(
            message=f"quadrature budget exceeded after {evaluations} evaluations "
            f"(estimate {value!r} +/- {abs_error:.3g})"
        )
