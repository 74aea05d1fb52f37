"""Selects the convolution kernel implementation at import time.

The compiled extension ``fedsa._kernels`` is used when it is importable;
otherwise, or when ``FEDSA_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy fallback in ``fedsa._kernels_py`` is used.
"""

import os

from . import _kernels_py

_force_py = os.environ.get("FEDSA_PURE_PYTHON", "") not in ("", "0")

if _force_py:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
]
