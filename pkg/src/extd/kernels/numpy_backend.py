"""Pure-numpy convolution kernels.

Forward runs im2col (a strided window view, no copy) followed by a BLAS
contraction; the two gradient kernels reuse the same machinery, expressing
grad-input as a zero-dilated full correlation with the flipped, transposed
filter bank.  All three are exact direct convolutions and keep the dtype of
their inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND_NAME = "numpy"


def _window_cols(x: np.ndarray, kh: int, kw: int, stride: int,
                 ph: int, pw: int) -> np.ndarray:
    """Return the (N, C, outH, outW, kh, kw) window view of the padded input."""
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return cols[:, :, ::stride, ::stride]


def conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int,
                   ph: int, pw: int, groups: int) -> np.ndarray:
    n, c, _, _ = x.shape
    out_c, cg, kh, kw = w.shape
    cols = _window_cols(x, kh, kw, stride, ph, pw)
    if groups == 1:
        y = np.tensordot(w, cols, axes=((1, 2, 3), (1, 4, 5)))
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    if groups == c and out_c == c:
        return np.ascontiguousarray(
            np.einsum("nchwij,cij->nchw", cols, w[:, 0], optimize=True))
    og = out_c // groups
    parts = []
    for g in range(groups):
        parts.append(np.tensordot(w[g * og:(g + 1) * og],
                                  cols[:, g * cg:(g + 1) * cg],
                                  axes=((1, 2, 3), (1, 4, 5))))
    y = np.concatenate(parts, axis=0).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(y)


def conv2d_grad_weights(x: np.ndarray, gy: np.ndarray, w_shape: tuple,
                        stride: int, ph: int, pw: int,
                        groups: int) -> np.ndarray:
    out_c, cg, kh, kw = w_shape
    c = x.shape[1]
    cols = _window_cols(x, kh, kw, stride, ph, pw)
    if groups == 1:
        gw = np.tensordot(gy, cols, axes=((0, 2, 3), (0, 2, 3)))
        return np.ascontiguousarray(gw)
    if groups == c and out_c == c:
        gw = np.einsum("nchw,nchwij->cij", gy, cols, optimize=True)
        return np.ascontiguousarray(gw[:, None])
    og = out_c // groups
    parts = []
    for g in range(groups):
        parts.append(np.tensordot(gy[:, g * og:(g + 1) * og],
                                  cols[:, g * cg:(g + 1) * cg],
                                  axes=((0, 2, 3), (0, 2, 3))))
    return np.ascontiguousarray(np.concatenate(parts, axis=0))


def conv2d_grad_input(w: np.ndarray, gy: np.ndarray, x_shape: tuple,
                      stride: int, ph: int, pw: int,
                      groups: int) -> np.ndarray:
    n, c, h, wd = x_shape
    out_c, cg, kh, kw = w.shape
    oh, ow = gy.shape[2], gy.shape[3]
    if stride > 1:
        gyd = np.zeros((n, out_c, (oh - 1) * stride + 1, (ow - 1) * stride + 1),
                       dtype=gy.dtype)
        gyd[:, :, ::stride, ::stride] = gy
    else:
        gyd = gy
    # Filter bank for the adjoint: swap in/out channel roles within each
    # group and flip spatially.
    og = out_c // groups
    wt = np.empty((c, og, kh, kw), dtype=w.dtype)
    for g in range(groups):
        wg = w[g * og:(g + 1) * og, :, ::-1, ::-1]
        wt[g * cg:(g + 1) * cg] = wg.transpose(1, 0, 2, 3)
    full = conv2d_forward(gyd, wt, 1, kh - 1, kw - 1, groups)
    # Windows that stop short of the padded edge leave a zero remainder.
    gx = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=gy.dtype)
    gx[:, :, :full.shape[2], :full.shape[3]] = full
    return np.ascontiguousarray(gx[:, :, ph:ph + h, pw:pw + wd])
