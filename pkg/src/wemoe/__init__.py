"""Desk-scale model-merging workbench.

Static task-arithmetic merging, weight-ensembling MoE merging with
per-layer or shared routers, sparse dictionaries, test-time router
adaptation by entropy minimization, and the synthetic benchmark plus
analysis harness around them.
"""

from .tensor import Tensor, Tape, set_default_dtype, set_strict_finite, use_dtype

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "set_default_dtype",
    "set_strict_finite",
    "use_dtype",
    "__version__",
]
