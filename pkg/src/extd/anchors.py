"""Prior boxes, overlap, box coding and scale-compensated matching.

Boxes are (x, y, w, h) with x, y the top-left corner in pixels.  Anchors are
square, one per feature-map cell, sized 4x the level stride.  Matching is
the two-stage scheme: threshold at 0.35 with a best-anchor guarantee per
ground truth, then top anchors above 0.1 until each box holds the average
stage-one count.  All ties break toward the lower index, so the assignment
is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LABEL_NEG = 0
LABEL_POS = 1
LABEL_IGNORE = -1

DECODE_CLAMP = 4.0  # |log scale| ceiling applied before exponentiation


@dataclass(frozen=True)
class AnchorGrid:
    boxes: np.ndarray            # (A, 4) xywh, float64
    strides: tuple[int, ...]     # per level
    sizes: tuple[int, ...]       # per level, 4 * stride
    grid_hw: tuple[tuple[int, int], ...]
    level_offsets: tuple[int, ...]  # start index of each level's anchors

    def __len__(self) -> int:
        return self.boxes.shape[0]


def generate_anchors(input_h: int, input_w: int, levels: int = 6) -> AnchorGrid:
    """Square 1:1 anchors, one per cell, centered on cell centers."""
    mult = 2 ** (levels + 1)
    if input_h % mult or input_w % mult:
        raise ValueError(f"input {input_h}x{input_w} not divisible by {mult}")
    parts, strides, sizes, grids, offsets = [], [], [], [], []
    total = 0
    for lvl in range(1, levels + 1):
        stride = 2 ** (lvl + 1)
        size = 4 * stride
        rows, cols = input_h // stride, input_w // stride
        cy, cx = np.meshgrid(
            stride * (np.arange(rows) + 0.5),
            stride * (np.arange(cols) + 0.5), indexing="ij")
        level = np.stack([cx - size / 2.0, cy - size / 2.0,
                          np.full_like(cx, float(size)),
                          np.full_like(cx, float(size))],
                         axis=-1).reshape(-1, 4)
        parts.append(level)
        strides.append(stride)
        sizes.append(size)
        grids.append((rows, cols))
        offsets.append(total)
        total += rows * cols
    return AnchorGrid(np.concatenate(parts, axis=0), tuple(strides),
                      tuple(sizes), tuple(grids), tuple(offsets))


# ---------------------------------------------------------------------------
# overlap and coding


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Jaccard overlap of two xywh boxes."""
    return float(iou_matrix(np.asarray(a, dtype=np.float64).reshape(1, 4),
                            np.asarray(b, dtype=np.float64).reshape(1, 4))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(len(a), len(b)) pairwise Jaccard overlaps for xywh boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - \
        np.maximum(a[:, 0, None], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None, :]) - \
        np.maximum(a[:, 1, None], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return inter / union


def encode(gt: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dh) regression target of a gt box against an anchor."""
    gt = np.asarray(gt, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if np.any(gt[..., 2:] <= 0):
        raise ValueError("ground-truth extents must be positive")
    gcx, gcy = gt[..., 0] + gt[..., 2] / 2, gt[..., 1] + gt[..., 3] / 2
    acx, acy = anchor[..., 0] + anchor[..., 2] / 2, anchor[..., 1] + anchor[..., 3] / 2
    return np.stack([(gcx - acx) / anchor[..., 2],
                     (gcy - acy) / anchor[..., 3],
                     np.log(gt[..., 2] / anchor[..., 2]),
                     np.log(gt[..., 3] / anchor[..., 3])], axis=-1)


def decode(deltas: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Inverse of encode, with the log-scale terms clamped to +-4."""
    deltas = np.asarray(deltas, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    acx, acy = anchor[..., 0] + anchor[..., 2] / 2, anchor[..., 1] + anchor[..., 3] / 2
    cx = acx + deltas[..., 0] * anchor[..., 2]
    cy = acy + deltas[..., 1] * anchor[..., 3]
    w = anchor[..., 2] * np.exp(np.clip(deltas[..., 2], -DECODE_CLAMP, DECODE_CLAMP))
    h = anchor[..., 3] * np.exp(np.clip(deltas[..., 3], -DECODE_CLAMP, DECODE_CLAMP))
    return np.stack([cx - w / 2, cy - h / 2, w, h], axis=-1)


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchAssignment:
    labels: np.ndarray       # (A,) int8: 1 positive, 0 negative, -1 ignore
    matched_gt: np.ndarray   # (A,) int64, -1 where not positive
    reg_targets: np.ndarray  # (A, 4) float64, zeros where not positive

    @property
    def n_pos(self) -> int:
        return int((self.labels == LABEL_POS).sum())


def match_scale_compensated(gts: np.ndarray, anchor_boxes: np.ndarray,
                            t1: float = 0.35,
                            t2: float = 0.1) -> MatchAssignment:
    """Two-stage anchor assignment against an (A, 4) anchor box array.

    Stage 1: anchors whose best overlap reaches t1 go to their argmax gt, and
    each gt with no anchor yet claims its best-overlap unassigned anchor
    whatever the overlap.  Stage 2: with A* the floor of the mean stage-1
    count (at least 1), underfilled gts take their highest remaining anchors
    above t2, in descending overlap, until reaching A*.
    """
    anchor_boxes = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    na = anchor_boxes.shape[0]
    if na == 0:
        raise ValueError("no anchors to match against")
    labels = np.zeros(na, dtype=np.int8)
    matched = np.full(na, -1, dtype=np.int64)
    targets = np.zeros((na, 4), dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    ng = gts.shape[0]
    if ng == 0:
        return MatchAssignment(labels, matched, targets)

    overlaps = iou_matrix(anchor_boxes, gts)   # (A, G)

    best_per_anchor = overlaps.argmax(axis=1)  # lowest index wins ties
    best_val = overlaps[np.arange(na), best_per_anchor]
    stage1 = best_val >= t1
    labels[stage1] = LABEL_POS
    matched[stage1] = best_per_anchor[stage1]

    for g in range(ng):  # best-anchor guarantee, claimed from free anchors
        if (matched == g).any():
            continue
        free = labels != LABEL_POS
        if not free.any():
            continue
        cand = np.where(free)[0]
        a = cand[overlaps[cand, g].argmax()]
        labels[a] = LABEL_POS
        matched[a] = g

    counts = np.bincount(matched[matched >= 0], minlength=ng)
    avg = max(1, int(counts.sum() // ng))
    for g in range(ng):
        need = avg - counts[g]
        if need <= 0:
            continue
        free = np.where(labels != LABEL_POS)[0]
        ok = free[overlaps[free, g] > t2]
        order = ok[np.lexsort((ok, -overlaps[ok, g]))][:need]
        labels[order] = LABEL_POS
        matched[order] = g
        counts[g] += len(order)

    pos = labels == LABEL_POS
    targets[pos] = encode(gts[matched[pos]], anchor_boxes[pos])
    return MatchAssignment(labels, matched, targets)
