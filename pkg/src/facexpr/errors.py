"""Exception types shared across the package.

Two broad failure classes matter to callers (and to the CLI exit codes):
bad input data versus numerical breakdown during computation.
"""


class ValidationError(ValueError):
    """Input data violates a documented precondition or file format."""


class NumericalError(ArithmeticError):
    """A numerical procedure failed (divergence, degenerate geometry, ...)."""
