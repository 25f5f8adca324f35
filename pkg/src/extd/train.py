"""SGD training loop, schedule, and finite-difference gradient checking."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    def threadpool_limits(*_a, **_k):
        return contextlib.nullcontext()

from . import autograd as ag
from .anchors import generate_anchors, match_scale_compensated
from .augment import AugmentOptions, Sample, augment, resize_bilinear
from .loss import (LossBreakdown, batch_loss, flatten_heads,
                   hard_negative_mine, per_anchor_ce)
from .model import (ModelConfig, apply_bn_updates, build_model, decay_exempt,
                    forward_graph, trainable_names, wrap_trainable)


@dataclass
class Schedule:
    base_lr: float = 1e-3
    total_iters: int = 240_000
    drops: tuple[tuple[int, float], ...] = ((120_000, 1e-4), (180_000, 1e-5))
    batch_size: int = 16

    def __post_init__(self):
        last_it, last_lr = 0, self.base_lr
        for it, lr in self.drops:
            if it <= last_it or lr >= last_lr:
                raise ValueError("drop points must increase in iteration "
                                 "and decrease in learning rate")
            last_it, last_lr = it, lr

    def lr_at(self, iteration: int) -> float:
        lr = self.base_lr
        for it, drop_lr in self.drops:
            if iteration >= it:
                lr = drop_lr
        return lr

    @classmethod
    def scaled(cls, total_iters: int, base_lr: float = 1e-3,
               batch_size: int = 16) -> "Schedule":
        """Recipe schedule rescaled to a different run length (drops at 50%/75%)."""
        return cls(base_lr=base_lr, total_iters=total_iters,
                   drops=((total_iters // 2, base_lr * 0.1),
                          (total_iters * 3 // 4, base_lr * 0.01)),
                   batch_size=batch_size)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, np.ndarray], **kw) -> "OptimizerState":
        vel = {k: np.zeros_like(params[k]) for k in trainable_names(params)}
        return cls(velocity=vel, **kw)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: OptimizerState) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v (in place).

    Weight decay skips BN affine parameters and prelu slopes.
    """
    if set(grads) != set(state.velocity):
        missing = set(state.velocity) ^ set(grads)
        raise ValueError(f"gradient/velocity key mismatch: {sorted(missing)[:4]}")
    for name, g in grads.items():
        p = params[name]
        v = state.velocity[name]
        wd = 0.0 if decay_exempt(name) else state.weight_decay
        v *= state.momentum
        v += g.astype(v.dtype)
        if wd:
            v += wd * p
        p -= state.lr * v.astype(p.dtype)


# ---------------------------------------------------------------------------
# training


def format_trace_line(it: int, bd_total: float, bd_cls: float, bd_reg: float,
                      lr: float) -> str:
    return (f"{it} {bd_total:.6g} {bd_cls:.6g} {bd_reg:.6g} {lr:.6g}")


def train_loop(config: ModelConfig, schedule: Schedule,
               dataset: list[Sample], seed: int, resolution: int = 128,
               params: dict[str, np.ndarray] | None = None,
               augment_opt: AugmentOptions | None = None,
               momentum: float = 0.9, weight_decay: float = 5e-4,
               trace_path: str | None = None,
               log_every: int = 0) -> tuple[dict[str, np.ndarray], list[str]]:
    """Deterministic SGD training; returns params and the loss-trace lines."""
    if not dataset:
        raise ValueError("dataset is empty")
    mult = config.input_multiple()
    if resolution % mult:
        raise ValueError(f"resolution {resolution} not divisible by {mult}")
    rng = np.random.Generator(np.random.PCG64(seed))
    if params is None:
        params = build_model(config, seed)
    opt = OptimizerState.create(params, lr=schedule.base_lr,
                                momentum=momentum, weight_decay=weight_decay)
    grid = generate_anchors(resolution, resolution, config.levels)
    trace: list[str] = []
    trace_file = open(trace_path, "a", encoding="utf-8") if trace_path else None
    # Single-thread BLAS here: the loop interleaves many small BLAS calls
    # with the compiled direct kernels, and idle BLAS workers spin-waiting
    # between calls otherwise starve them.
    try:
        stack = contextlib.ExitStack()
        stack.enter_context(threadpool_limits(limits=1, user_api="blas"))
        for it in range(1, schedule.total_iters + 1):
            opt.lr = schedule.lr_at(it - 1)
            idx = rng.integers(0, len(dataset), size=schedule.batch_size)
            batch = []
            for i in idx:
                s = dataset[int(i)]
                if augment_opt is not None:
                    s = augment(s, resolution, rng, augment_opt)
                elif s.image.shape[1:] != (resolution, resolution):
                    scale = resolution / s.image.shape[1]
                    s = Sample(resize_bilinear(s.image, resolution, resolution),
                               np.asarray(s.boxes, dtype=np.float64) * scale)
                batch.append(s)
            images = np.stack([s.image for s in batch]).astype(np.float32)

            pvars = wrap_trainable(params)
            out = forward_graph(params, config, images, train=True, pvars=pvars)
            cls, reg = flatten_heads(out.heads)

            mined = []
            for bi, s in enumerate(batch):
                assign = match_scale_compensated(s.boxes, grid.boxes)
                ce = per_anchor_ce(cls.data[bi], assign.labels)
                labels = hard_negative_mine(ce, assign)
                mined.append((labels, assign.reg_targets))

            total_var, breakdowns = batch_loss(cls, reg, mined)
            total = float(total_var.data)
            if not np.isfinite(total):
                raise RuntimeError(f"non-finite loss at iteration {it}: {total}")
            ag.backward(total_var)
            grads = {k: (pvars[k].grad if pvars[k].grad is not None
                         else np.zeros_like(params[k]))
                     for k in pvars}
            sgd_step(params, grads, opt)
            apply_bn_updates(params, out.bn_updates)

            line = format_trace_line(
                it, total,
                float(np.mean([b.cls_term for b in breakdowns])),
                float(np.mean([b.reg_term for b in breakdowns])), opt.lr)
            trace.append(line)
            if trace_file:
                trace_file.write(line + "\n")
            if log_every and it % log_every == 0:
                print(line, flush=True)
    finally:
        stack.close()
        if trace_file:
            trace_file.close()
    return params, trace


# ---------------------------------------------------------------------------
# gradient checking


# Three levels keep the coarsest 64x64-input feature map at 4x4: deeper
# stacks collapse to 1x1 maps whose batch variance is exactly zero, parking
# every BN output on the ReLU kink where central differences are one-sided.
TINY_CONFIG = ModelConfig(variant="fpn", width=8, depth=2, activation="prelu",
                          expansion=(1, 2), levels=3)


@dataclass
class GradCheckReport:
    per_tensor: dict[str, float]  # max relative error per parameter tensor
    max_rel_err: float
    step: float

    def render(self) -> str:
        lines = [f"{name} {err:.3e}" for name, err in self.per_tensor.items()]
        lines.append(f"MAX {self.max_rel_err:.3e}")
        return "\n".join(lines)


def grad_check(config: ModelConfig = TINY_CONFIG, seed: int = 0,
               input_size: int = 64, samples_per_tensor: int = 20,
               step: float = 1e-4) -> GradCheckReport:
    """Compare end-to-end loss gradients against central finite differences.

    Runs in double precision on a fixed random image with two synthetic
    boxes.  The match/mining selection is frozen from the initial forward so
    the loss is smooth in the parameters being probed.  A probe that
    disagrees at the base step is retried at step/8 and step/64: a genuine
    gradient error stays put while a relu/maxout kink straddle shrinks with
    the step, so the best of the three is reported.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params = build_model(config, seed, dtype=np.float64)
    image = rng.uniform(0.0, 1.0, (1, 3, input_size, input_size))
    grid = generate_anchors(input_size, input_size, config.levels)
    s = input_size
    boxes = np.array([[s * 0.1, s * 0.1, s * 0.25, s * 0.3],
                      [s * 0.55, s * 0.5, s * 0.3, s * 0.25]])
    assign = match_scale_compensated(boxes, grid.boxes)

    def loss_of(pv=None):
        out = forward_graph(params, config, image, train=True, pvars=pv)
        return flatten_heads(out.heads), out

    (cls, reg), _ = loss_of()
    ce = per_anchor_ce(cls.data[0], assign.labels)
    labels = hard_negative_mine(ce, assign)
    mined = [(labels, assign.reg_targets)]

    pvars = wrap_trainable(params)
    (cls, reg), _ = loss_of(pvars)
    total, _ = batch_loss(cls, reg, mined)
    ag.backward(total)
    analytic = {k: (pvars[k].grad if pvars[k].grad is not None
                    else np.zeros_like(params[k])) for k in pvars}

    def eval_loss() -> float:
        (c, r), _ = loss_of()
        t, _ = batch_loss(c, r, mined)
        return float(t.data)

    def probe(flat: np.ndarray, j: int, an: float) -> float:
        best = np.inf
        for h in (step, step / 8, step / 64):
            orig = flat[j]
            flat[j] = orig + h
            hi = eval_loss()
            flat[j] = orig - h
            lo = eval_loss()
            flat[j] = orig
            fd = (hi - lo) / (2 * h)
            best = min(best, abs(fd - an) / max(abs(fd), abs(an), 1e-4))
            if best < 1e-4:
                break
        return best

    report: dict[str, float] = {}
    for name in analytic:
        flat = params[name].reshape(-1)
        n = min(samples_per_tensor, flat.size)
        picks = rng.choice(flat.size, size=n, replace=False)
        an_flat = analytic[name].reshape(-1)
        report[name] = max(probe(flat, j, float(an_flat[j])) for j in picks)
    return GradCheckReport(report, max(report.values()), step)
