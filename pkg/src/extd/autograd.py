"""Minimal reverse-mode tape over the kernel ops.

A `Var` wraps an ndarray plus a closure that maps the upstream gradient to
per-parent gradients.  Graphs are built define-by-run by the traced ops
below; `backward` walks the tape once in reverse topological order and sums
gradients into leaves, which is what makes the weight-shared backbone "free":
reusing one leaf in several passes simply accumulates.
"""

from __future__ import annotations

import numpy as np

from . import ops


class Var:
    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data: np.ndarray, parents: tuple = (), vjp=None):
        self.data = data
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype})"


def leaf(data: np.ndarray) -> Var:
    return Var(np.asarray(data))


def _topo(root: Var) -> list[Var]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(root: Var, seed: np.ndarray | None = None) -> None:
    """Accumulate gradients of `root` into every reachable Var's .grad."""
    if seed is None:
        seed = np.ones_like(root.data)
    root.grad = seed
    for node in reversed(_topo(root)):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in zip(node._parents, node._vjp(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g.copy() if g.base is not None else g
            else:
                parent.grad = parent.grad + g


def zero_grads(vars_: dict[str, Var] | list[Var]) -> None:
    items = vars_.values() if isinstance(vars_, dict) else vars_
    for v in items:
        v.grad = None


# ---------------------------------------------------------------------------
# traced ops


def conv2d(x: Var, w: Var, spec: ops.ConvSpec, bias: Var | None = None) -> Var:
    b = bias.data if bias is not None else None
    y = ops.conv2d(x.data, w.data, spec, b)
    if bias is None:
        def vjp(gy):
            return ops.conv2d_vjp(x.data, w.data, spec, gy)
        return Var(y, (x, w), vjp)

    def vjp_b(gy):
        gx, gw = ops.conv2d_vjp(x.data, w.data, spec, gy)
        return gx, gw, ops.conv2d_bias_vjp(gy)
    return Var(y, (x, w, bias), vjp_b)


def batch_norm_train(x: Var, gamma: Var, beta: Var,
                     eps: float = 1e-5) -> tuple[Var, np.ndarray, np.ndarray]:
    """Batch-stat normalization; returns (y, batch_mean, batch_var).

    Running statistics are left to the caller so graph evaluation stays pure.
    """
    mean, var = ops._bn_train_stats(x.data)
    y = ops._bn_apply(x.data, mean, var, gamma.data, beta.data, eps)

    def vjp(gy):
        return ops._bn_train_vjp(x.data, mean, var, gamma.data, eps, gy)
    return Var(y, (x, gamma, beta), vjp), mean, var


def batch_norm_infer(x: Var, gamma: Var, beta: Var, rmean: np.ndarray,
                     rvar: np.ndarray, eps: float = 1e-5) -> Var:
    y = ops._bn_apply(x.data, rmean, rvar, gamma.data, beta.data, eps)

    def vjp(gy):
        inv = 1.0 / np.sqrt(rvar + eps)
        xhat = (x.data - rmean[None, :, None, None]) * inv[None, :, None, None]
        gx = (gy * (gamma.data * inv)[None, :, None, None]).astype(x.data.dtype)
        return gx, (gy * xhat).sum(axis=(0, 2, 3)), gy.sum(axis=(0, 2, 3))
    return Var(y, (x, gamma, beta), vjp)


def activation(x: Var, kind, slopes: Var | None = None) -> Var:
    kind = ops.Activation(kind)
    neg = x.data < 0
    if kind is ops.Activation.RELU:
        y = np.where(neg, 0, x.data)
        slope = None
    else:
        slope = (slopes.data[None, :, None, None]
                 if kind is ops.Activation.PRELU else ops.LEAKY_SLOPE)
        y = np.where(neg, slope * x.data, x.data).astype(x.data.dtype)

    def vjp(gy):
        if kind is ops.Activation.RELU:
            return (np.where(neg, 0, gy),)
        gx = np.where(neg, slope * gy, gy).astype(gy.dtype)
        if kind is ops.Activation.LRELU:
            return (gx,)
        gslope = np.where(neg, gy * x.data, 0).sum(axis=(0, 2, 3))
        return gx, gslope.astype(slopes.data.dtype)
    parents = (x,) if kind is not ops.Activation.PRELU else (x, slopes)
    return Var(y, parents, vjp)


def bilinear_upsample_x2(x: Var) -> Var:
    y = ops.bilinear_upsample_x2(x.data)
    return Var(y, (x,), lambda gy: (ops.bilinear_upsample_x2_vjp(x.data, gy),))


def add(a: Var, b: Var) -> Var:
    return Var(ops.add(a.data, b.data), (a, b), lambda gy: (gy, gy))


def maxout_background(x: Var, bg_channels: int) -> Var:
    y = ops.maxout_background(x.data, bg_channels)
    return Var(y, (x,),
               lambda gy: (ops.maxout_background_vjp(x.data, bg_channels, gy),))


def transpose(x: Var, axes: tuple[int, ...]) -> Var:
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return Var(y, (x,), lambda gy: (np.ascontiguousarray(gy.transpose(inv)),))


def reshape(x: Var, shape: tuple[int, ...]) -> Var:
    old = x.data.shape
    return Var(x.data.reshape(shape), (x,), lambda gy: (gy.reshape(old),))


def concat(parts: list[Var], axis: int = 0) -> Var:
    y = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(gy):
        return tuple(np.ascontiguousarray(g)
                     for g in np.split(gy, splits, axis=axis))
    return Var(y, tuple(parts), vjp)
