"""Convolution kernel backends.

The compiled Cython core is used when importable; otherwise the numpy
fallback takes over. Set ``DELTALEARN_KERNELS=numpy`` or ``=cython`` to
force a backend (``cython`` raises if the extension is missing). Both
backends accumulate in the same order, so results are interchangeable.
"""

import importlib
import os

from . import conv_np

_requested = os.environ.get("DELTALEARN_KERNELS", "auto").strip().lower()
if _requested not in ("auto", "cython", "numpy"):
    raise ValueError(f"DELTALEARN_KERNELS must be auto, cython or numpy, got {_requested!r}")

conv_cy = None
if _requested in ("auto", "cython"):
    try:
        conv_cy = importlib.import_module(".conv_cy", __name__)
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "DELTALEARN_KERNELS=cython but the compiled kernels are unavailable; "
                "rebuild the package with a C toolchain"
            ) from None

_impl = conv_cy if conv_cy is not None else conv_np
BACKEND = "cython" if _impl is conv_cy else "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
