"""Patch-sparse video feature pipeline.

Submodules:

* ``numcore``   - tape autodiff, MAC counting, seeded RNG, eigensolver
* ``videoio``   - raw clip container, synthetic clips, frame sampling
* ``gopcodec``  - group-of-pictures codec (motion + exact residuals)
* ``spectral``  - graph-Laplacian patch saliency
* ``selector``  - differentiable patch selection
* ``psformer``  - sparse transformer over selected patches
* ``training``  - losses, optimizer, two-stage schedule
* ``costmodel`` - analytic and counted multiply-accumulate reports
* ``cli``       - command-line entry points
"""

__version__ = "0.1.0"

from .errors import (
    DegenerateFeatureError,
    DegenerateGraphError,
    NumericalError,
    ParseError,
    ShapeError,
    SparsepatchError,
    UsageError,
    ValidationError,
)

__all__ = [
    "DegenerateFeatureError",
    "DegenerateGraphError",
    "NumericalError",
    "ParseError",
    "ShapeError",
    "SparsepatchError",
    "UsageError",
    "ValidationError",
    "__version__",
]
