"""Exception hierarchy shared across the toolkit."""


class FlexmodalError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(FlexmodalError):
    """Bad user input: inconsistent shapes, out-of-range parameters, malformed files."""


class NumericalError(FlexmodalError):
    """Numerical failure: singular matrices, rank deficiency, unstable loops."""


class ConvergenceWarning(UserWarning):
    """Solver finished without meeting its convergence target."""
