"""Convolution kernel backend selection.

Two implementations coexist: a compiled Cython extension of direct loops
(`extd.kernels._fast`) and a pure-numpy im2col/BLAS backend.  When the
extension is importable the default ("fast") backend routes each call to
whichever side measures faster for that shape class: direct loops take
depthwise convolutions and strided input-gradients, BLAS contractions take
the matmul-like pointwise and dense cases.  Without the extension the numpy
backend handles everything.  Set EXTD_KERNELS=numpy or EXTD_KERNELS=fast to
force a side; `benchmarks/compare_backends.py` measures the two head to
head.
"""

from __future__ import annotations

import os

from . import numpy_backend

_forced = os.environ.get("EXTD_KERNELS", "").strip().lower()


def _load_fast():
    try:
        from . import _fast as mod
    except ImportError:
        return None
    return mod


_fast = None if _forced == "numpy" else _load_fast()
if _fast is None and _forced in ("fast", "cython", "compiled"):
    raise ImportError(
        f"EXTD_KERNELS={_forced} requested but the compiled extension is not "
        f"built; run `pip install -e . --no-build-isolation`")

BACKEND = "fast" if _fast is not None else "numpy"


def backend_name() -> str:
    """Name of the kernel backend selected at import time."""
    return BACKEND


if _fast is not None:

    def _depthwise(groups: int, c_in: int, c_out: int) -> bool:
        return groups == c_in and groups == c_out

    def conv2d_forward(x, w, stride, ph, pw, groups):
        if _depthwise(groups, x.shape[1], w.shape[0]):
            return _fast.conv2d_forward(x, w, stride, ph, pw, groups)
        return numpy_backend.conv2d_forward(x, w, stride, ph, pw, groups)

    def conv2d_grad_input(w, gy, x_shape, stride, ph, pw, groups):
        if stride > 1 or _depthwise(groups, x_shape[1], w.shape[0]):
            return _fast.conv2d_grad_input(w, gy, x_shape, stride, ph, pw,
                                           groups)
        return numpy_backend.conv2d_grad_input(w, gy, x_shape, stride, ph, pw,
                                               groups)

    def conv2d_grad_weights(x, gy, w_shape, stride, ph, pw, groups):
        if _depthwise(groups, x.shape[1], w_shape[0]):
            return _fast.conv2d_grad_weights(x, gy, w_shape, stride, ph, pw,
                                             groups)
        return numpy_backend.conv2d_grad_weights(x, gy, w_shape, stride, ph,
                                                 pw, groups)
else:
    conv2d_forward = numpy_backend.conv2d_forward
    conv2d_grad_input = numpy_backend.conv2d_grad_input
    conv2d_grad_weights = numpy_backend.conv2d_grad_weights
