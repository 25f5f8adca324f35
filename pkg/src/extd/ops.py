"""Differentiable NCHW kernels.

Tensors are contiguous numpy arrays of shape (N, C, H, W) in float32 or
float64.  Every operation here is a pure function with an exact
vector-Jacobian product; convolution dispatches to the selected kernel
backend, everything else is vectorized numpy.  Batch norm is the one
stateful exception: in train mode `batch_norm` updates the running
statistics of the state it is handed, as documented on the type.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels

_CHECK_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf output checks (slow; meant for test runs)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _checked(y: np.ndarray) -> np.ndarray:
    if _CHECK_FINITE and not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite values in op output")
    return y


class Activation(str, Enum):
    RELU = "relu"
    LRELU = "lrelu"
    PRELU = "prelu"


LEAKY_SLOPE = 0.25  # fixed leaky slope; also the initial learnable slope
PRELU_INIT = 0.25


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a 2-D convolution."""

    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int = 0
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels="
                f"{self.in_channels} and out_channels={self.out_channels}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups,
                self.kernel[0], self.kernel[1])

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"kernel {self.kernel} does not fit {h}x{w} "
                             f"input with padding {self.padding}")
        return oh, ow


@dataclass
class BatchNormState:
    """Per-channel affine normalization state.

    Train mode normalizes with the biased batch statistics over (N, H, W)
    and folds them into the running estimates in place with the configured
    momentum; infer mode normalizes with the running estimates.  Biased
    variance is used throughout so single-element batches stay finite.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(gamma=np.ones(channels, dtype=dtype),
                   beta=np.zeros(channels, dtype=dtype),
                   running_mean=np.zeros(channels, dtype=dtype),
                   running_var=np.ones(channels, dtype=dtype), **kw)

    def _validate(self, x: np.ndarray) -> None:
        c = x.shape[1]
        for name in ("gamma", "beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (c,):
                raise ValueError(f"{name} has length "
                                 f"{getattr(self, name).shape}, expected ({c},)")


def _require_nchw(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank-4 NCHW, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: np.ndarray, w: np.ndarray, spec: ConvSpec,
           bias: np.ndarray | None = None) -> np.ndarray:
    """Direct 2-D convolution (cross-correlation, the usual CNN convention)."""
    _require_nchw(x)
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, "
                         f"spec expects {spec.in_channels}")
    if w.shape != spec.weight_shape:
        raise ValueError(f"weights shaped {w.shape}, "
                         f"spec expects {spec.weight_shape}")
    spec.out_hw(x.shape[2], x.shape[3])
    y = kernels.conv2d_forward(x, w, spec.stride, spec.padding, spec.padding,
                               spec.groups)
    if bias is not None:
        if not spec.has_bias:
            raise ValueError("bias passed to a bias-free conv")
        y += bias[None, :, None, None]
    return _checked(y)


def conv2d_vjp(x: np.ndarray, w: np.ndarray, spec: ConvSpec,
               gy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d w.r.t. input and weights."""
    oh, ow = spec.out_hw(x.shape[2], x.shape[3])
    if gy.shape != (x.shape[0], spec.out_channels, oh, ow):
        raise ValueError(f"upstream grad shaped {gy.shape}, expected "
                         f"{(x.shape[0], spec.out_channels, oh, ow)}")
    gx = kernels.conv2d_grad_input(w, gy, x.shape, spec.stride,
                                   spec.padding, spec.padding, spec.groups)
    gw = kernels.conv2d_grad_weights(x, gy, spec.weight_shape, spec.stride,
                                     spec.padding, spec.padding, spec.groups)
    return _checked(gx), _checked(gw)


def conv2d_bias_vjp(gy: np.ndarray) -> np.ndarray:
    return gy.sum(axis=(0, 2, 3))


# ---------------------------------------------------------------------------
# batch normalization


def _bn_train_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var


def _bn_apply(x, mean, var, gamma, beta, eps):
    inv = 1.0 / np.sqrt(var + eps)
    scale = (gamma * inv).astype(x.dtype)
    shift = (beta - mean * scale).astype(x.dtype)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batch_norm(x: np.ndarray, state: BatchNormState) -> np.ndarray:
    _require_nchw(x)
    state._validate(x)
    if state.mode == "train":
        if x.shape[0] * x.shape[2] * x.shape[3] == 0:
            raise ValueError("train-mode batch norm over an empty batch")
        mean, var = _bn_train_stats(x)
        m = state.momentum
        state.running_mean += m * (mean - state.running_mean)
        state.running_var += m * (var - state.running_var)
    else:
        mean, var = state.running_mean, state.running_var
    return _checked(_bn_apply(x, mean, var, state.gamma, state.beta, state.eps))


def batch_norm_vjp(x: np.ndarray, state: BatchNormState,
                   gy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. (input, gamma, beta) for the state's current mode."""
    if state.mode == "train":
        mean, var = _bn_train_stats(x)
        return _bn_train_vjp(x, mean, var, state.gamma, state.eps, gy)
    inv = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x - state.running_mean[None, :, None, None]) * inv[None, :, None, None]
    gx = gy * (state.gamma * inv)[None, :, None, None]
    dgamma = (gy * xhat).sum(axis=(0, 2, 3))
    dbeta = gy.sum(axis=(0, 2, 3))
    return gx.astype(x.dtype), dgamma, dbeta


def _bn_train_vjp(x, mean, var, gamma, eps, gy):
    m = x.shape[0] * x.shape[2] * x.shape[3]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    dbeta = gy.sum(axis=(0, 2, 3))
    dgamma = (gy * xhat).sum(axis=(0, 2, 3))
    gxhat = gy * gamma[None, :, None, None]
    gx = (inv[None, :, None, None] / m) * (
        m * gxhat
        - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    return gx.astype(x.dtype), dgamma, dbeta


# ---------------------------------------------------------------------------
# activations


def activation(x: np.ndarray, kind: Activation | str,
               slopes: np.ndarray | None = None) -> np.ndarray:
    """relu / leaky-relu (slope 0.25) / prelu with per-channel slopes."""
    kind = Activation(kind)
    if kind is Activation.RELU:
        return _checked(np.maximum(x, 0))
    if kind is Activation.LRELU:
        return _checked(np.where(x >= 0, x, LEAKY_SLOPE * x.astype(x.dtype)))
    if slopes is None or slopes.shape != (x.shape[1],):
        raise ValueError("prelu needs one learnable slope per channel")
    s = slopes[None, :, None, None]
    return _checked(np.where(x >= 0, x, s * x).astype(x.dtype))


def activation_vjp(x: np.ndarray, kind: Activation | str,
                   slopes: np.ndarray | None,
                   gy: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns (grad_input, grad_slopes); grad_slopes is None unless prelu."""
    kind = Activation(kind)
    neg = x < 0
    if kind is Activation.RELU:
        return np.where(neg, 0, gy).astype(x.dtype), None
    if kind is Activation.LRELU:
        return np.where(neg, LEAKY_SLOPE * gy, gy).astype(x.dtype), None
    s = slopes[None, :, None, None]
    gx = np.where(neg, s * gy, gy).astype(x.dtype)
    gslope = np.where(neg, gy * x, 0).sum(axis=(0, 2, 3)).astype(slopes.dtype)
    return gx, gslope


# ---------------------------------------------------------------------------
# bilinear x2 upsampling (align-corners off: sample centers at (i+.5)/2-.5)


def _x2_taps(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source index pairs and low-side weights for length n -> 2n."""
    src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
    lo = np.clip(np.floor(src).astype(np.int64), 0, n - 1)
    hi = np.clip(lo + 1, 0, n - 1)
    wl = 1.0 - (src - np.floor(src))
    wl[src < 0] = 1.0  # clamp below: all weight on index 0
    return lo, hi, wl


def bilinear_upsample_x2(x: np.ndarray) -> np.ndarray:
    _require_nchw(x)
    n, c, h, w = x.shape
    rlo, rhi, rwl = _x2_taps(h)
    clo, chi, cwl = _x2_taps(w)
    rwl = rwl.astype(x.dtype)[None, None, :, None]
    cwl = cwl.astype(x.dtype)[None, None, None, :]
    rows = x[:, :, rlo, :] * rwl + x[:, :, rhi, :] * (1 - rwl)
    y = rows[:, :, :, clo] * cwl + rows[:, :, :, chi] * (1 - cwl)
    return _checked(np.ascontiguousarray(y))


def bilinear_upsample_x2_vjp(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    rlo, rhi, rwl = _x2_taps(h)
    clo, chi, cwl = _x2_taps(w)
    cwl = cwl.astype(gy.dtype)[None, None, None, :]
    grows = np.zeros((n, c, 2 * h, w), dtype=gy.dtype)
    np.add.at(grows, (slice(None), slice(None), slice(None), clo), gy * cwl)
    np.add.at(grows, (slice(None), slice(None), slice(None), chi), gy * (1 - cwl))
    rwl = rwl.astype(gy.dtype)[None, None, :, None]
    gx = np.zeros((n, c, h, w), dtype=gy.dtype)
    np.add.at(gx, (slice(None), slice(None), rlo, slice(None)), grows * rwl)
    np.add.at(gx, (slice(None), slice(None), rhi, slice(None)), grows * (1 - rwl))
    return _checked(gx)


# ---------------------------------------------------------------------------
# add / maxout


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _checked(a + b)


def maxout_background(x: np.ndarray, bg_channels: int) -> np.ndarray:
    """Collapse the first bg_channels channels to their max, keep the last.

    Output channel 0 is the background max, channel 1 the untouched
    foreground channel; ties go to the lowest channel index.
    """
    _require_nchw(x)
    if x.shape[1] != bg_channels + 1:
        raise ValueError(f"maxout expects {bg_channels + 1} channels, "
                         f"got {x.shape[1]}")
    bg = x[:, :bg_channels].max(axis=1, keepdims=True)
    return _checked(np.concatenate([bg, x[:, bg_channels:]], axis=1))


def maxout_background_vjp(x: np.ndarray, bg_channels: int,
                          gy: np.ndarray) -> np.ndarray:
    winner = x[:, :bg_channels].argmax(axis=1)  # argmax takes the lowest tie
    gx = np.zeros_like(x)
    n, _, h, w = x.shape
    ni, hi, wi = np.ogrid[:n, :h, :w]
    gx[ni, winner, hi, wi] = gy[:, 0]
    gx[:, bg_channels] = gy[:, 1]
    return _checked(gx)
