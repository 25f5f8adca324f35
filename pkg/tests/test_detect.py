"""Detection pipeline, NMS against brute force, AP hand cases, benchmark."""

import numpy as np
import pytest

from extd.detect import (Detection, average_precision, bench, detect, nms,
                         pad_to_multiple)
from extd.model import ModelConfig, build_model
from reference import naive_nms

TINY = ModelConfig(variant="fpn", width=8, depth=2, activation="prelu",
                   expansion=(1, 2), levels=3)


def det(x, y, w, h, score, level=1):
    return Detection(np.array([x, y, w, h], dtype=np.float64), score, level)


# ---------------------------------------------------------------------------
# nms


def test_nms_single_and_duplicates():
    d = det(0, 0, 10, 10, 0.9)
    assert nms([d], 0.3) == [d]
    dups = [det(0, 0, 10, 10, 0.9), det(0, 0, 10, 10, 0.9)]
    assert len(nms(dups, 0.3)) == 1


def test_nms_hand_case():
    a = det(0, 0, 10, 10, 0.9)
    b = det(2, 0, 10, 10, 0.8)   # iou(a, b) = 8/12 = 0.66
    c = det(50, 50, 10, 10, 0.7)
    kept = nms([a, b, c], 0.3)
    assert [k.score for k in kept] == [0.9, 0.7]


def test_nms_matches_bruteforce(rng):
    for _ in range(200):
        n = int(rng.integers(1, 25))
        boxes = np.stack([np.concatenate([rng.uniform(0, 50, 2),
                                          rng.uniform(2, 20, 2)])
                          for _ in range(n)])
        scores = np.round(rng.uniform(0, 1, n), 2)  # rounding forces ties
        dets = [det(*boxes[i], scores[i]) for i in range(n)]
        kept = nms(dets, 0.4)
        ref = naive_nms(boxes, scores.tolist(), 0.4)
        got_idx = [dets.index(k) for k in kept]
        assert got_idx == ref


def test_nms_order_invariance_up_to_ties(rng):
    boxes = [det(0, 0, 10, 10, 0.9), det(1, 1, 10, 10, 0.5),
             det(30, 30, 5, 5, 0.7)]
    kept1 = {(d.score, tuple(d.box)) for d in nms(boxes, 0.3)}
    kept2 = {(d.score, tuple(d.box))
             for d in nms(list(reversed(boxes)), 0.3)}
    assert kept1 == kept2


# ---------------------------------------------------------------------------
# average precision


def test_ap_perfect_detections():
    gts = [np.array([[0.0, 0.0, 10.0, 10.0], [30.0, 30.0, 8.0, 8.0]])]
    dets = [[det(0, 0, 10, 10, 1.0), det(30, 30, 8, 8, 1.0)]]
    rep = average_precision(dets, gts)
    assert rep.ap == pytest.approx(1.0)
    assert rep.counts == (2, 0, 0)


def test_ap_zero_detections():
    gts = [np.array([[0.0, 0.0, 10.0, 10.0]])]
    rep = average_precision([[]], gts)
    assert rep.ap == 0.0
    assert rep.counts == (0, 0, 1)


def test_ap_hand_interpolated_case():
    gts = [np.array([[0.0, 0.0, 10.0, 10.0], [30.0, 30.0, 10.0, 10.0]])]
    dets = [[det(0, 0, 10, 10, 0.9),          # hit
             det(60, 60, 10, 10, 0.8),        # miss
             det(30, 30, 10, 10, 0.7)]]       # hit
    rep = average_precision(dets, gts)
    assert rep.ap == pytest.approx(5 / 6)


def test_ap_monotone_score_transform_invariant(rng):
    gts = [np.stack([np.concatenate([rng.uniform(0, 40, 2),
                                     rng.uniform(5, 15, 2)])
                     for _ in range(3)])]
    dets = [[det(*np.concatenate([rng.uniform(0, 40, 2),
                                  rng.uniform(5, 15, 2)]),
                 float(rng.uniform(0.1, 0.9))) for _ in range(6)]]
    base = average_precision(dets, gts).ap
    squashed = [[Detection(d.box, d.score ** 3, d.level) for d in dets[0]]]
    assert average_precision(squashed, gts).ap == pytest.approx(base)


def test_ap_recall_monotone_along_sweep(rng):
    gts = [np.array([[0.0, 0.0, 10.0, 10.0]])]
    dets = [[det(0, 0, 10, 10, 0.6), det(20, 20, 5, 5, 0.3)]]
    rep = average_precision(dets, gts)
    recalls = [r for r, _ in rep.pr_points]
    assert all(b >= a - 1e-12 for a, b in zip(recalls, recalls[1:]))
    assert len(rep.pr_points) == 1000


def test_ap_one_to_one_matching():
    gts = [np.array([[0.0, 0.0, 10.0, 10.0]])]
    dets = [[det(0, 0, 10, 10, 0.9), det(1, 0, 10, 10, 0.8)]]
    rep = average_precision(dets, gts)
    assert rep.counts[0] == 1 and rep.counts[1] == 1  # second det is a fp


# ---------------------------------------------------------------------------
# detect pipeline


def test_padding_helper():
    img = np.zeros((3, 600, 600), dtype=np.float32)
    padded = pad_to_multiple(img, 256)
    assert padded.shape == (3, 768, 768)
    assert padded[:, 600:, :].sum() == 0


def test_untrained_scores_are_half(rng):
    params = build_model(TINY, 0)
    for name in list(params):  # zero the head convs -> zero logits
        if name.startswith("head."):
            params[name] = np.zeros_like(params[name])
    img = rng.uniform(0, 1, (3, 64, 64)).astype(np.float32)
    dets = detect(params, TINY, img, conf_thresh=0.4)
    assert len(dets) > 0
    assert all(d.score == pytest.approx(0.5) for d in dets)


def test_detect_pads_and_clips_to_original(rng):
    params = build_model(TINY, 0)
    img = rng.uniform(0, 1, (3, 60, 60)).astype(np.float32)
    dets = detect(params, TINY, img, conf_thresh=0.05)
    for d in dets:
        x, y, w, h = d.box
        assert 0 <= x and 0 <= y
        assert x + w <= 60 + 1e-9 and y + h <= 60 + 1e-9
        assert w > 0 and h > 0


def test_detect_deterministic(rng):
    params = build_model(TINY, 0)
    img = rng.uniform(0, 1, (3, 64, 64)).astype(np.float32)
    a = detect(params, TINY, img)
    b = detect(params, TINY, img)
    assert len(a) == len(b)
    for da, db in zip(a, b):
        assert da.score == db.score and np.array_equal(da.box, db.box)


def test_lower_conf_never_fewer_candidates(rng):
    params = build_model(TINY, 0)
    img = rng.uniform(0, 1, (3, 64, 64)).astype(np.float32)
    hi = detect(params, TINY, img, conf_thresh=0.6, topk=10**6, nms_iou=1.1)
    lo = detect(params, TINY, img, conf_thresh=0.3, topk=10**6, nms_iou=1.1)
    assert len(lo) >= len(hi)


# ---------------------------------------------------------------------------
# bench


def test_bench_reports_all_resolutions_and_ordering(rng):
    params = build_model(TINY, 0)
    points = bench(params, TINY, [32, 256], trials=7, warmup=1)
    assert [p.resolution for p in points] == [32, 256]
    assert all(p.trials == 7 for p in points)
    assert points[1].mean_s > points[0].mean_s  # 64x the pixels
