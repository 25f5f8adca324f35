"""Trainer-level behavior: gradcheck coverage, determinism, failure modes."""

import dataclasses

import numpy as np
import pytest

from extd import autograd as ag
from extd.anchors import MatchAssignment
from extd.augment import AugmentOptions, Sample
from extd.loss import batch_loss, flatten_heads
from extd.model import (build_model, forward_graph, iterate_features,
                        wrap_trainable)
from extd.synth import synth_sample
from extd.train import TINY_CONFIG, Schedule, grad_check, train_loop


def small_dataset(n=4, res=64, seed=3):
    rng = np.random.Generator(np.random.PCG64(seed))
    return [Sample(*synth_sample(res, rng)) for _ in range(n)]


def test_grad_check_passes_and_covers_all_tensors():
    report = grad_check(TINY_CONFIG, seed=0, samples_per_tensor=6)
    assert report.max_rel_err < 1e-3
    names = set(report.per_tensor)
    assert "entry.w" in names and "head.s4.cls.b" in names
    assert "backbone.ir1.dw.slope" in names
    assert not any(".rmean" in n or ".rvar" in n for n in names)


def test_grad_check_toy_input_128():
    report = grad_check(TINY_CONFIG, seed=2, input_size=128,
                        samples_per_tensor=2)
    assert report.max_rel_err < 1e-3


def test_zero_loss_gives_zero_gradients(rng):
    params = build_model(TINY_CONFIG, 0, dtype=np.float64)
    image = rng.uniform(0, 1, (1, 3, 64, 64))
    pvars = wrap_trainable(params)
    out = forward_graph(params, TINY_CONFIG, image, train=True, pvars=pvars)
    cls, reg = flatten_heads(out.heads)
    n = cls.shape[1]
    labels = np.full(n, -1, dtype=np.int8)  # everything ignored -> loss 0
    total, bds = batch_loss(cls, reg, [(labels, np.zeros((n, 4)))])
    assert float(total.data) == 0.0
    ag.backward(total)
    for name, var in pvars.items():
        if var.grad is not None:
            assert np.abs(var.grad).max() < 1e-8, name


def test_train_deterministic_short():
    ds = small_dataset()
    sched = Schedule(base_lr=1e-3, total_iters=6, drops=((5, 1e-4),),
                     batch_size=2)
    cfg = TINY_CONFIG
    p1, t1 = train_loop(cfg, sched, ds, seed=9, resolution=64,
                        augment_opt=AugmentOptions())
    p2, t2 = train_loop(cfg, sched, ds, seed=9, resolution=64,
                        augment_opt=AugmentOptions())
    assert t1 == t2
    for k in p1:
        assert p1[k].tobytes() == p2[k].tobytes()
    _, t3 = train_loop(cfg, sched, ds, seed=10, resolution=64,
                       augment_opt=AugmentOptions())
    assert t3 != t1


def test_trace_line_format():
    ds = small_dataset(2)
    sched = Schedule(base_lr=1e-3, total_iters=2, drops=((1, 1e-4),),
                     batch_size=1)
    _, trace = train_loop(TINY_CONFIG, sched, ds, seed=0, resolution=64)
    first = trace[0].split()
    assert first[0] == "1" and len(first) == 5
    float(first[1]), float(first[2]), float(first[3]), float(first[4])
    assert trace[1].split()[4] == "0.0001"


def test_nonfinite_loss_aborts_with_iteration():
    from extd import ops
    ds = small_dataset(2)
    sched = Schedule(base_lr=1e-3, total_iters=3, drops=((2, 1e-4),),
                     batch_size=1)
    params = build_model(TINY_CONFIG, 0)
    params["entry.w"][:] = np.inf
    ops.set_debug_checks(False)  # let the trainer's own guard fire
    try:
        with pytest.raises(RuntimeError, match="iteration 1"):
            train_loop(TINY_CONFIG, sched, ds, seed=0, resolution=64,
                       params=params)
    finally:
        ops.set_debug_checks(True)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_loop(TINY_CONFIG, Schedule(), [], seed=0)


def test_indivisible_resolution_rejected():
    with pytest.raises(ValueError):
        train_loop(TINY_CONFIG, Schedule(), small_dataset(1), seed=0,
                   resolution=60)


def test_fully_convolutional_nonsquare(rng):
    params = build_model(TINY_CONFIG, 0)
    image = rng.uniform(0, 1, (1, 3, 128, 192)).astype(np.float32)
    feats = iterate_features(params, TINY_CONFIG, image)
    assert [(m.shape[2], m.shape[3]) for m in feats.maps] == \
        [(32, 48), (16, 24), (8, 12)]


def test_trace_file_appends(tmp_path):
    ds = small_dataset(2)
    sched = Schedule(base_lr=1e-3, total_iters=2, drops=((1, 1e-4),),
                     batch_size=1)
    path = tmp_path / "run.trace"
    train_loop(TINY_CONFIG, sched, ds, seed=0, resolution=64,
               trace_path=str(path))
    train_loop(TINY_CONFIG, sched, ds, seed=0, resolution=64,
               trace_path=str(path))
    lines = path.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 4  # append-only across runs
