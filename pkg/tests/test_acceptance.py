"""Acceptance criteria, one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`.  The desk-scale training
criterion dominates the runtime (several minutes on a small CPU); everything
else finishes in seconds.
"""

import dataclasses

import numpy as np
import pytest

from extd import fileio
from extd.anchors import generate_anchors, match_scale_compensated
from extd.augment import AugmentOptions, Sample
from extd.costs import count_madds, count_net_madds, plan_param_total
from extd.detect import average_precision, detect
from extd.loss import (LAMBDA_DEFAULT, hard_negative_mine, multitask_loss,
                       per_anchor_ce, smooth_l1)
from extd.model import (ModelConfig, build_model, default_config,
                        describe_s3fd_mobilefacenet, forward_graph,
                        iterate_features)
from extd.synth import synth_sample
from extd.train import TINY_CONFIG, Schedule, grad_check, train_loop
from reference import naive_match

PARAM_TARGETS = {("fpn", 32): 63_000, ("fpn", 48): 100_000,
                 ("fpn", 64): 160_000, ("ssd", 32): 56_000,
                 ("ssd", 48): 86_000, ("ssd", 64): 140_000}
MADDS_TARGETS = {("fpn", 32): 4.52e9, ("fpn", 48): 6.67e9,
                 ("fpn", 64): 11.2e9, ("ssd", 32): 4.35e9,
                 ("ssd", 48): 6.63e9, ("ssd", 64): 10.6e9}

# Desk-scale training recipe (criterion 8): width-16 override of fpn-32.
DESK_CONFIG = dataclasses.replace(default_config("fpn", 16), bn_per_pass=True)
DESK_SCHEDULE = Schedule(base_lr=1e-3, total_iters=2000,
                         drops=((1400, 1e-4), (1800, 1e-5)), batch_size=4)
DESK_AUGMENT = AugmentOptions(crop=False)


def ok(criterion: str, detail: str = "") -> None:
    print(f"[PASS] {criterion}" + (f" -- {detail}" if detail else ""))


def test_criterion_01_parameter_budgets():
    got = {}
    for (variant, width), target in PARAM_TARGETS.items():
        n = plan_param_total(default_config(variant, width))
        got[(variant, width)] = n
        assert abs(n - target) <= 0.10 * target, \
            f"{variant}-{width}: {n} vs {target}"
    ok("1 parameter budgets within 10%",
       " ".join(f"{v}-{w}:{n}" for (v, w), n in got.items()))


def test_criterion_02_madds_budgets():
    for (variant, width), target in MADDS_TARGETS.items():
        n = count_madds(default_config(variant, width), 640, 640).total_madds
        assert abs(n - target) <= 0.15 * target, \
            f"{variant}-{width}: {n / 1e9:.2f}G vs {target / 1e9}G"
    ref = count_net_madds(describe_s3fd_mobilefacenet(), 640, 640)
    assert abs(ref.total_params - 1.2e6) <= 0.10 * 1.2e6
    assert abs(ref.total_madds - 12.7e9) <= 0.15 * 12.7e9
    ok("2 madds budgets within 15%",
       f"reference net {ref.total_params} params "
       f"{ref.total_madds / 1e9:.2f}G madds")


def test_criterion_03_shape_law():
    cfg = default_config("fpn", 32)
    params = build_model(cfg, 0)
    image = np.zeros((1, 3, 640, 640), dtype=np.float32)
    feats = iterate_features(params, cfg, image)
    dims = [m.shape[2] for m in feats.maps]
    assert dims == [160, 80, 40, 20, 10, 5]
    assert [m.shape[3] for m in feats.maps] == dims
    grid = generate_anchors(640, 640, 6)
    assert len(grid) == 34125
    ok("3 shape law", f"levels {dims}, anchors {len(grid)}")


def test_criterion_04_gradient_fidelity():
    report = grad_check(TINY_CONFIG, seed=0)
    trainable = set(report.per_tensor)
    expected = {k for k in build_model(TINY_CONFIG, 0, dtype=np.float64)
                if ".bn.rmean" not in k and ".bn.rvar" not in k}
    assert trainable == expected, "gradcheck must cover every tensor"
    assert report.max_rel_err < 1e-3, f"max rel err {report.max_rel_err:.2e}"
    ok("4 gradient fidelity",
       f"{len(trainable)} tensors, max rel err {report.max_rel_err:.2e}")


def test_criterion_05_sharing_invariant(rng):
    cfg6 = dataclasses.replace(TINY_CONFIG, levels=6)
    cfg3 = dataclasses.replace(TINY_CONFIG, levels=3)
    p6, p3 = build_model(cfg6, 0), build_model(cfg3, 0)
    shared6 = {k: v.shape for k, v in p6.items()
               if k.startswith(("entry", "backbone"))}
    shared3 = {k: v.shape for k, v in p3.items()
               if k.startswith(("entry", "backbone"))}
    assert shared6 == shared3
    # every name that differs is a per-level attachment (head / upsample)
    diff = set(p6) ^ set(p3)
    assert diff and all(k.startswith(("head.", "fpn.up")) for k in diff)

    image = rng.uniform(0, 1, (1, 3, 128, 128)).astype(np.float32)
    base = iterate_features(p6, cfg6, image)
    bumped_params = {k: v.copy() for k, v in p6.items()}
    bumped_params["backbone.ir1.dw.w"][0, 0, 1, 1] += 0.25
    bumped = iterate_features(bumped_params, cfg6, image)
    changed = [not np.array_equal(a, b)
               for a, b in zip(base.maps, bumped.maps)]
    assert all(changed)
    ok("5 sharing invariant",
       f"{len(shared6)} shared tensors; one-weight bump changes all "
       f"{len(changed)} levels")


def test_criterion_06_matching_oracle(rng):
    checked = 0
    for _ in range(1000):
        na = int(rng.integers(2, 9))
        ng = int(rng.integers(1, min(4, na + 1)))
        anchors = np.stack([np.concatenate([rng.uniform(0, 40, 2),
                                            rng.uniform(4, 30, 2)])
                            for _ in range(na)])
        gts = np.stack([np.concatenate([rng.uniform(0, 40, 2),
                                        rng.uniform(4, 30, 2)])
                        for _ in range(ng)])
        m = match_scale_compensated(gts, anchors)
        labels, matched = naive_match(gts, anchors)
        assert np.array_equal(m.labels == 1, labels == 1)
        assert np.array_equal(m.matched_gt, matched)
        for g in range(ng):
            assert (m.matched_gt == g).any(), "gt left without a positive"
        checked += 1
    ok("6 matching oracle", f"{checked} scenes identical to brute force")


def test_criterion_07_loss_identities(rng):
    n = 64
    cls = np.zeros((n, 2))
    labels = np.full(n, 0, dtype=np.int8)
    labels[:4] = 1
    from extd.anchors import MatchAssignment
    assign = MatchAssignment(labels.copy(),
                             np.where(labels == 1, 0, -1).astype(np.int64),
                             np.zeros((n, 4)))
    outputs = [(cls.T[None, :, :, None], np.zeros((n, 4)).T[None, :, :, None])]
    bd = multitask_loss(outputs, assign)
    assert bd.cls_term == pytest.approx(4 * np.log(2), abs=1e-12)

    losses = rng.uniform(0, 1, n)
    for n_pos, available in ((4, 60), (10, 20), (0, 64)):
        lab = np.full(n, 0, dtype=np.int8)
        lab[:n_pos] = 1
        lab[n_pos + available:] = -1
        a = MatchAssignment(lab, np.where(lab == 1, 0, -1).astype(np.int64),
                            np.zeros((n, 4)))
        mined = hard_negative_mine(losses, a)
        expect = min(3 * n_pos, available) if n_pos else min(16, available)
        assert int((mined == 0).sum()) == expect

    cls = rng.normal(size=(n, 2))
    reg = rng.normal(size=(n, 4))
    targets = rng.normal(size=(n, 4))
    lab = np.full(n, 0, dtype=np.int8)
    lab[:5] = 1
    lab[50:] = -1
    assign = MatchAssignment(lab, np.where(lab == 1, 0, -1).astype(np.int64),
                             targets)
    bd = multitask_loss([(cls.T[None, :, :, None],
                          reg.T[None, :, :, None])], assign)
    sel = lab != -1
    manual = (LAMBDA_DEFAULT / sel.sum() * per_anchor_ce(cls, lab)[sel].sum()
              + smooth_l1(reg[lab == 1] - targets[lab == 1]).sum()
              / (lab == 1).sum())
    assert abs(bd.total - manual) < 1e-6
    ok("7 loss identities",
       f"zero-logit cls {bd.lam}*ln2 exact; mining counts exact; "
       f"decomposition gap {abs(bd.total - manual):.1e}")


@pytest.fixture(scope="module")
def desk_data():
    rng = np.random.Generator(np.random.PCG64(42))
    train = [Sample(*synth_sample(128, rng)) for _ in range(500)]
    held = [Sample(*synth_sample(128, rng)) for _ in range(100)]
    return train, held


def test_criterion_08_desk_scale_training(desk_data):
    train, held = desk_data
    params, trace = train_loop(DESK_CONFIG, DESK_SCHEDULE, train, seed=0,
                               resolution=128, augment_opt=DESK_AUGMENT)
    dets = [detect(params, DESK_CONFIG, s.image, conf_thresh=0.01)
            for s in held]
    report = average_precision(dets, [s.boxes for s in held])
    assert report.ap >= 0.5, f"held-out AP {report.ap:.3f}"

    single = train[:1]
    sched = Schedule(base_lr=1e-3, total_iters=200, drops=((190, 1e-4),),
                     batch_size=4)
    _, overfit_trace = train_loop(DESK_CONFIG, sched, single, seed=1,
                                  resolution=128, augment_opt=None)
    losses = [float(line.split()[1]) for line in overfit_trace]
    assert min(losses) <= 0.5 * losses[0], \
        f"overfit loss {losses[0]:.3f} -> min {min(losses):.3f}"
    ok("8 desk-scale training",
       f"held-out AP@0.5 {report.ap:.3f}; overfit loss "
       f"{losses[0]:.2f} -> {min(losses):.2f}")


def test_criterion_09_determinism(tmp_path, desk_data):
    train, held = desk_data
    sched = Schedule(base_lr=1e-3, total_iters=25, drops=((20, 1e-4),),
                     batch_size=2)

    def one_run(tag):
        trace_path = tmp_path / f"{tag}.trace"
        params, _ = train_loop(DESK_CONFIG, sched, train[:20], seed=7,
                               resolution=128, augment_opt=AugmentOptions(),
                               trace_path=str(trace_path))
        dets = detect(params, DESK_CONFIG, held[0].image)
        det_path = tmp_path / f"{tag}.dets"
        det_path.write_text(fileio.format_detections("held0.ppm", dets),
                            encoding="utf-8")
        return trace_path.read_bytes(), det_path.read_bytes()

    t1, d1 = one_run("run1")
    t2, d2 = one_run("run2")
    assert t1 == t2, "loss traces differ between identically seeded runs"
    assert d1 == d2, "detection files differ between identically seeded runs"
    ok("9 determinism", f"{len(t1)} trace bytes and {len(d1)} detection "
       f"bytes bit-identical")


def test_criterion_10_serialization(tmp_path, rng):
    params = build_model(TINY_CONFIG, 2)
    params["odd.double"] = rng.normal(size=(3, 1, 2)).astype(np.float64)
    p1, p2 = tmp_path / "a.extd", tmp_path / "b.extd"
    fileio.save_weights(p1, params)
    back = fileio.load_weights(p1)
    fileio.save_weights(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()

    ann = "a.ppm\n2\n1.00 2.00 3.00 4.00\n5.00 6.00 7.00 8.00\nb.ppm\n0\n"
    once = fileio.format_annotations(fileio.parse_annotations(ann))
    assert fileio.format_annotations(fileio.parse_annotations(once)) == once

    from extd.detect import Detection
    dets = [Detection(np.array([1.0, 2.0, 3.0, 4.0]), 0.5, 1)]
    text1 = fileio.format_detections("x.ppm", dets)
    text2 = fileio.format_detections("x.ppm", dets)
    assert text1 == text2

    gts = [np.array([[0.0, 0.0, 8.0, 8.0]])]
    rep = average_precision([dets], gts)
    assert fileio.format_pr_curve(rep) == fileio.format_pr_curve(rep)

    cfg_text = fileio.format_config(DESK_CONFIG, seed=0)
    parsed, _ = fileio.parse_config(cfg_text)
    assert fileio.format_config(parsed, seed=0) == cfg_text
    ok("10 serialization", "weights bit-exact; text formats fixed points")
