"""Inference, NMS, average precision, and a latency micro-benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .anchors import decode, generate_anchors, iou_matrix
from .loss import log_softmax2
from .model import ModelConfig, forward_graph

CONF_THRESH = 0.05
NMS_IOU = 0.3
TOPK = 750
PR_THRESHOLDS = 1000


@dataclass(eq=False)
class Detection:
    box: np.ndarray   # xywh, float64
    score: float
    level: int        # pyramid level of origin, 1-based (1 = finest)


@dataclass
class EvalReport:
    ap: float
    pr_points: list[tuple[float, float]]  # (recall, precision), high -> low threshold
    counts: tuple[int, int, int]          # tp, fp, fn at score 0.5


def pad_to_multiple(image: np.ndarray, mult: int) -> np.ndarray:
    """Zero-pad a (3, H, W) image bottom/right to the next multiple."""
    _, h, w = image.shape
    ph = (mult - h % mult) % mult
    pw = (mult - w % mult) % mult
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)))


def detect(params: dict[str, np.ndarray], config: ModelConfig,
           image: np.ndarray, conf_thresh: float = CONF_THRESH,
           nms_iou: float = NMS_IOU, topk: int = TOPK) -> list[Detection]:
    """Forward, decode, filter, and suppress; boxes in original coordinates."""
    _, orig_h, orig_w = image.shape
    padded = pad_to_multiple(image.astype(np.float32), config.input_multiple())
    out = forward_graph(params, config, padded[None], train=False)
    grid = generate_anchors(padded.shape[1], padded.shape[2], config.levels)

    scores_parts, deltas_parts, level_parts = [], [], []
    for lvl, (cls, reg) in enumerate(out.heads, start=1):
        logits = cls.data[0].transpose(1, 2, 0).reshape(-1, 2)
        probs = np.exp(log_softmax2(logits))[:, 1]
        scores_parts.append(probs)
        deltas_parts.append(reg.data[0].transpose(1, 2, 0).reshape(-1, 4))
        level_parts.append(np.full(len(probs), lvl, dtype=np.int64))
    scores = np.concatenate(scores_parts)
    deltas = np.concatenate(deltas_parts)
    levels = np.concatenate(level_parts)

    keep = scores > conf_thresh
    if not keep.any():
        return []
    boxes = decode(deltas[keep].astype(np.float64), grid.boxes[keep])
    scores, levels = scores[keep].astype(np.float64), levels[keep]

    x1 = np.clip(boxes[:, 0], 0, orig_w)
    y1 = np.clip(boxes[:, 1], 0, orig_h)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2], 0, orig_w)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3], 0, orig_h)
    boxes = np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)
    valid = (boxes[:, 2] > 0) & (boxes[:, 3] > 0)
    boxes, scores, levels = boxes[valid], scores[valid], levels[valid]

    order = _nms_indices(boxes, scores, nms_iou)[:topk]
    return [Detection(boxes[i].copy(), float(scores[i]), int(levels[i]))
            for i in order]


def _nms_indices(boxes: np.ndarray, scores: np.ndarray,
                 iou_thresh: float) -> list[int]:
    idx = np.lexsort((np.arange(len(scores)), -scores))
    kept: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for i in idx:
        if suppressed[i]:
            continue
        kept.append(int(i))
        if len(boxes):
            ious = iou_matrix(boxes[i:i + 1], boxes)[0]
            suppressed |= ious > iou_thresh
    return kept


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy descending-score suppression; index breaks score ties."""
    if not dets:
        return []
    boxes = np.stack([d.box for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in _nms_indices(boxes, scores, iou_thresh)]


# ---------------------------------------------------------------------------
# average precision


def average_precision(dets_per_image: list[list[Detection]],
                      gts_per_image: list[np.ndarray],
                      iou_thresh: float = 0.5) -> EvalReport:
    """All-point interpolated AP with greedy score-ordered matching."""
    n_gts = sum(len(g) for g in gts_per_image)
    flat = [(d.score, img, j, d) for img, dets in enumerate(dets_per_image)
            for j, d in enumerate(dets)]
    flat.sort(key=lambda t: (-t[0], t[1], t[2]))
    matched = [np.zeros(len(g), dtype=bool) for g in gts_per_image]
    tp = np.zeros(len(flat))
    scores = np.array([t[0] for t in flat])
    for k, (_, img, _, det) in enumerate(flat):
        gts = np.asarray(gts_per_image[img], dtype=np.float64).reshape(-1, 4)
        if len(gts) == 0:
            continue
        ious = iou_matrix(det.box.reshape(1, 4), gts)[0]
        ious[matched[img]] = -1.0
        best = int(ious.argmax())
        if ious[best] >= iou_thresh:
            matched[img][best] = True
            tp[k] = 1.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gts if n_gts else np.zeros(len(flat))
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1)

    ap = _allpoint_ap(recall, precision) if n_gts else 0.0

    pr_points = []
    for k in range(PR_THRESHOLDS, 0, -1):
        t = k / PR_THRESHOLDS
        n = int(np.searchsorted(-scores, -t, side="right"))
        if n == 0:
            pr_points.append((0.0, 1.0))
        else:
            pr_points.append((float(recall[n - 1]), float(precision[n - 1])))

    n_at_half = int(np.searchsorted(-scores, -0.5, side="right"))
    tp_half = int(cum_tp[n_at_half - 1]) if n_at_half else 0
    fp_half = int(cum_fp[n_at_half - 1]) if n_at_half else 0
    return EvalReport(float(ap), pr_points, (tp_half, fp_half, n_gts - tp_half))


def _allpoint_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    r = np.concatenate([[0.0], recall, [recall[-1] if len(recall) else 0.0]])
    p = np.concatenate([[1.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):  # precision envelope from the right
        p[i] = max(p[i], p[i + 1])
    steps = np.where(r[1:] != r[:-1])[0]
    return float(((r[steps + 1] - r[steps]) * p[steps + 1]).sum())


# ---------------------------------------------------------------------------
# latency micro-benchmark


@dataclass
class BenchPoint:
    resolution: int
    mean_s: float
    std_s: float
    trials: int


def bench(params: dict[str, np.ndarray], config: ModelConfig,
          resolutions: list[int], trials: int = 1000,
          warmup: int = 2) -> list[BenchPoint]:
    """Forward-only wall-clock timing per input resolution."""
    points = []
    for res in resolutions:
        image = np.zeros((1, 3, res, res), dtype=np.float32)
        image = pad_to_multiple(image[0], config.input_multiple())[None]
        for _ in range(warmup):
            forward_graph(params, config, image, train=False)
        times = []
        for _ in range(trials):
            t0 = time.perf_counter()
            forward_graph(params, config, image, train=False)
            times.append(time.perf_counter() - t0)
        arr = np.array(times)
        points.append(BenchPoint(res, float(arr.mean()), float(arr.std()),
                                 trials))
    return points
