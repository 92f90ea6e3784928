"""Exception taxonomy shared across the package.

Argument problems raise ValueError (or the ShapeError subclass); everything
the CLI maps to a data/model exit code derives from ModelError or StateError;
non-finite numerics raise NumericError.
"""


class ShapeError(ValueError):
    """Array shapes are inconsistent with the operation's contract."""


class ModelError(RuntimeError):
    """A model file or model structure is missing or unusable."""


class StateError(RuntimeError):
    """An operation was invoked out of order (no recorded forward,
    training phases run out of sequence, ...)."""


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""
