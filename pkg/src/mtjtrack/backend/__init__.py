"""Kernel backend selection.

The compiled Cython extension is used when it is importable; otherwise the
numpy implementation takes over. Set MTJTRACK_BACKEND=numpy to force the
fallback (useful for benchmarking) or MTJTRACK_BACKEND=cython to fail loudly
when the extension is missing.
"""

import os

_requested = os.environ.get("MTJTRACK_BACKEND", "").strip().lower()

if _requested == "numpy":
    from . import kernels_np as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _kernels_cy as _impl

        BACKEND = "cython"
    except ImportError:
        if _requested == "cython":
            raise
        from . import kernels_np as _impl

        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
upsample2_forward = _impl.upsample2_forward
upsample2_backward = _impl.upsample2_backward

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2_forward",
    "maxpool2_backward",
    "upsample2_forward",
    "upsample2_backward",
]
