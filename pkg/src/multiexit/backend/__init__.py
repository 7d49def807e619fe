"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy
implementation is the fallback.  Override with MULTIEXIT_BACKEND=numpy
or =cython (the latter raises if the extension is missing).
"""

import os

from . import numpy_ops

_KERNELS = (
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "avgpool2d_forward",
    "avgpool2d_backward",
)

_requested = os.environ.get("MULTIEXIT_BACKEND", "auto")
if _requested not in ("auto", "cython", "numpy"):
    raise ValueError(f"MULTIEXIT_BACKEND must be auto, cython or numpy, got {_requested!r}")

if _requested == "numpy":
    _impl = numpy_ops
    BACKEND = "numpy"
else:
    try:
        from . import _fastops as _impl

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        _impl = numpy_ops
        BACKEND = "numpy"


def get_backend(name: str):
    """Return the kernel module for an explicit backend name (benchmarks, tests)."""
    if name == "numpy":
        return numpy_ops
    if name == "cython":
        from . import _fastops

        return _fastops
    raise ValueError(f"unknown backend {name!r}")


conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_weight = _impl.conv2d_backward_weight
maxpool2d_forward = _impl.maxpool2d_forward
maxpool2d_backward = _impl.maxpool2d_backward
avgpool2d_forward = _impl.avgpool2d_forward
avgpool2d_backward = _impl.avgpool2d_backward

__all__ = ["BACKEND", "get_backend", *_KERNELS]
