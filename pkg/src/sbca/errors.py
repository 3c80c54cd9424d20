"""Exception hierarchy shared across the package."""


class SBCAError(Exception):
    """Base class for every error raised by this package."""


class SchemaError(SBCAError, ValueError):
    """Input file is missing a required column."""


class ValidationError(SBCAError, ValueError):
    """Input data violates a domain invariant (nonpositive price, duplicate row, ...)."""


class SizeError(SBCAError, ValueError):
    """Shapes or lengths do not agree."""


class RangeError(SBCAError, ValueError):
    """A date or index lies outside the admissible range."""


class WindowError(RangeError):
    """Not enough history to build a lookback window."""


class ParameterError(SBCAError, ValueError):
    """A hyperparameter lies outside its admissible range."""


class NumericError(SBCAError, ArithmeticError):
    """Non-finite values reached a computation that requires finite input."""


class GraphError(SBCAError, RuntimeError):
    """The differentiation graph is malformed (e.g. contains a cycle)."""


class ConstructionError(SBCAError, ValueError):
    """A parameter construction cannot satisfy its preconditions."""


class UndefinedMetricError(SBCAError, ArithmeticError):
    """A performance metric is mathematically undefined for the given series."""


class InsolvencyError(SBCAError, ArithmeticError):
    """Net return factor became nonpositive: costs exceeded the gross return."""

    def __init__(self, step: int, net_factor: float):
        super().__init__(f"net return factor {net_factor!r} <= 0 at step {step}")
        self.step = step
        self.net_factor = net_factor


class TrainingError(SBCAError, RuntimeError):
    """Training aborted (NaN loss or similar)."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
