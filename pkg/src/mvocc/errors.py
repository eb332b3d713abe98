"""Shared exception types.

Dimension and parameter problems are ValueErrors so they behave like the
usual numpy failures; contract violations (misuse of a documented protocol)
are RuntimeErrors so callers can tell them apart from bad inputs.
"""


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested operation."""


class ParameterError(ValueError):
    """A configuration value is outside its valid range."""


class ContractError(RuntimeError):
    """A documented usage protocol was violated by the caller."""


class GenerationError(RuntimeError):
    """Scene synthesis could not satisfy its placement constraints."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed or inconsistent with the run."""
