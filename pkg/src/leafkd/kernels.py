"""Backend selection for the hot row kernels.

The compiled extension is used when it imports; otherwise the NumPy
fallback is loaded. Setting ``LEAF_PURE_PYTHON=1`` forces the fallback.
Integer scoring always takes the NumPy path: it is one BLAS matmul, which
beats the compiled scalar loop.
"""

import os

from . import _kernels_py

if os.environ.get("LEAF_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

softmax_rows = _impl.softmax_rows
softmax_rows_backward = _impl.softmax_rows_backward
layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
int8_scores = _kernels_py.int8_scores
binary_scores = _impl.binary_scores

__all__ = [
    "BACKEND",
    "softmax_rows",
    "softmax_rows_backward",
    "layer_norm_forward",
    "layer_norm_backward",
    "gelu_forward",
    "gelu_backward",
    "int8_scores",
    "binary_scores",
]
