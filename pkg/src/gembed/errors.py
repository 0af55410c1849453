"""Exception hierarchy shared by all gembed modules."""


class GembedError(Exception):
    """Base class for every error raised by gembed."""


class InputError(GembedError, ValueError):
    """Bad arguments: dimension mismatch, out-of-range label, missing id."""


class ConfigError(GembedError, ValueError):
    """A configuration that cannot be satisfied."""


class FormatError(GembedError):
    """Malformed file contents."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericalError(GembedError, ArithmeticError):
    """A numerical routine failed."""


class NotPositiveDefiniteError(NumericalError):
    def __init__(self, pivot, value):
        super().__init__(f"matrix is not positive definite: pivot {pivot} is {value!r}")
        self.pivot = pivot
        self.value = value


class TrainingError(NumericalError):
    def __init__(self, message, last_finite_epoch):
        super().__init__(f"{message} (last finite epoch: {last_finite_epoch})")
        self.last_finite_epoch = last_finite_epoch


class EvaluationError(GembedError, ValueError):
    """Score set that cannot be evaluated, e.g. one trial class is empty."""


class DiagnosticError(GembedError, ValueError):
    """Embedding subset too degenerate for the requested statistic."""
