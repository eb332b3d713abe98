"""Robust surround-view semantic occupancy at desk scale.

The package is organized bottom-up: a small float64 autodiff core, a
camera-ring geometry and view-masking layer, a synthetic scene simulator,
masked multi-view feature reconstruction, prototype-memory refinement, the
end-to-end pipeline, and evaluation metrics plus a missing-view protocol.
"""

from .autodiff import Tensor, backward
from .errors import (
    CheckpointError,
    ContractError,
    GenerationError,
    ParameterError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "ShapeError",
    "ParameterError",
    "ContractError",
    "GenerationError",
    "CheckpointError",
    "__version__",
]
