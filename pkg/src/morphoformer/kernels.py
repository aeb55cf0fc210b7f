"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``MORPHOFORMER_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("MORPHOFORMER_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND

gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
huber_fwd = _impl.huber_fwd
huber_grad = _impl.huber_grad
window_counts = _impl.window_counts


def compiled_available():
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
