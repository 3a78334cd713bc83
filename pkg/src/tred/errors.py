"""Exception types shared across the toolkit."""


class InvalidInputError(ValueError):
    """Input tensor violates a precondition (non-finite entries, bad rank)."""


class ShapeMismatchError(InvalidInputError):
    """Operands that must agree in shape do not."""


class ConfigError(ValueError):
    """Experiment configuration is malformed or inconsistent."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class NumericalError(RuntimeError):
    """A numerical routine (e.g. SVD) failed beyond recovery."""
