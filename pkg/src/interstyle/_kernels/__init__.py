"""Convolution kernel backends.

The compiled Cython core is preferred when built; a pure-numpy fallback
keeps the package functional without a compiler. Override the selection
with INTERSTYLE_KERNELS={cython,numpy}.
"""

import os

_requested = os.environ.get("INTERSTYLE_KERNELS", "").strip().lower()

if _requested in ("numpy", "py", "python"):
    from . import _conv_np as _impl
    BACKEND = "numpy"
elif _requested in ("", "cython", "c"):
    try:
        from . import _conv_cy as _impl
        BACKEND = "cython"
    except ImportError:
        if _requested:
            raise ImportError(
                "INTERSTYLE_KERNELS=cython requested but the compiled "
                "extension is not available; reinstall with a C compiler"
            )
        from . import _conv_np as _impl
        BACKEND = "numpy"
else:
    raise ImportError(f"unknown INTERSTYLE_KERNELS value {_requested!r}")

conv2d_forward = _impl.conv2d_forward
conv2d_backward_kernel = _impl.conv2d_backward_kernel
conv2d_backward_input = _impl.conv2d_backward_input
