"""Multitask detection loss and online hard-negative mining.

The classification term is 2-class cross-entropy over positives plus the
mined negatives, scaled by lambda and divided by that selection count; the
regression term is smooth-L1 summed over the four deltas and averaged over
positives only.  Mining keeps the ratio * n_pos highest-loss negatives
(top 16 when there are no positives), ties resolved toward the lower anchor
index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .anchors import LABEL_IGNORE, LABEL_NEG, LABEL_POS, MatchAssignment

LAMBDA_DEFAULT = 4.0
MINE_RATIO = 3
MINE_FLOOR = 16  # negatives kept when an image has no positives


@dataclass
class LossBreakdown:
    total: float
    cls_term: float
    reg_term: float
    n_cls: int
    n_reg: int
    lam: float


def log_softmax2(logits: np.ndarray) -> np.ndarray:
    """Stable per-row log-softmax for (..., 2) logits."""
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def per_anchor_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Cross-entropy per anchor; ignored anchors get 0."""
    logp = log_softmax2(logits)
    target = (labels == LABEL_POS).astype(np.int64)
    ce = -np.take_along_axis(logp, target[:, None], axis=-1)[:, 0]
    ce[labels == LABEL_IGNORE] = 0.0
    return ce


def hard_negative_mine(cls_losses: np.ndarray, assignment: MatchAssignment,
                       ratio: int = MINE_RATIO) -> np.ndarray:
    """Revised labels: positives kept, hardest negatives kept, rest ignored."""
    labels = assignment.labels.copy()
    neg_idx = np.where(labels == LABEL_NEG)[0]
    n_pos = int((labels == LABEL_POS).sum())
    keep = ratio * n_pos if n_pos > 0 else MINE_FLOOR
    if len(neg_idx) > keep:
        order = neg_idx[np.lexsort((neg_idx, -cls_losses[neg_idx]))]
        labels[order[keep:]] = LABEL_IGNORE
    return labels


def smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def _loss_values(cls: np.ndarray, reg: np.ndarray, labels: np.ndarray,
                 reg_targets: np.ndarray, lam: float,
                 count_ignored: bool = False) -> LossBreakdown:
    selected = labels != LABEL_IGNORE
    n_cls = int(labels.size) if count_ignored else int(selected.sum())
    pos = labels == LABEL_POS
    n_reg = int(pos.sum())
    ce = per_anchor_ce(cls, labels)
    cls_term = lam / n_cls * float(ce[selected].sum()) if n_cls else 0.0
    if n_reg:
        resid = reg[pos] - reg_targets[pos]
        reg_term = float(smooth_l1(resid).sum()) / n_reg
    else:
        reg_term = 0.0
    return LossBreakdown(cls_term + reg_term, cls_term, reg_term,
                         n_cls, n_reg, lam)


def multitask_loss(head_outputs: list[tuple[np.ndarray, np.ndarray]],
                   assignment: MatchAssignment, lam: float = LAMBDA_DEFAULT,
                   count_ignored: bool = False) -> LossBreakdown:
    """Loss over flattened per-level head outputs for one image.

    `assignment.labels` must already be mined (ignores in place); the
    flattened anchor count has to match the assignment exactly.
    `count_ignored` switches the classification denominator from the mined
    selection size to the full anchor count.
    """
    cls = np.concatenate(
        [c.transpose(0, 2, 3, 1).reshape(-1, c.shape[1]) for c, _ in head_outputs])
    reg = np.concatenate(
        [r.transpose(0, 2, 3, 1).reshape(-1, r.shape[1]) for _, r in head_outputs])
    if cls.shape[0] != assignment.labels.shape[0]:
        raise ValueError(f"head outputs cover {cls.shape[0]} anchors, "
                         f"assignment has {assignment.labels.shape[0]}")
    return _loss_values(cls, reg, assignment.labels, assignment.reg_targets,
                        lam, count_ignored)


# ---------------------------------------------------------------------------
# autograd path (batched)


def flatten_heads(heads: list[tuple[ag.Var, ag.Var]]) -> tuple[ag.Var, ag.Var]:
    """Stack per-level head maps into (B, A, 2) and (B, A, 4) anchor order."""
    cls_parts, reg_parts = [], []
    for c, r in heads:
        b, cc, h, w = c.shape
        cls_parts.append(ag.reshape(ag.transpose(c, (0, 2, 3, 1)), (b, h * w, cc)))
        rb, rc, rh, rw = r.shape
        reg_parts.append(ag.reshape(ag.transpose(r, (0, 2, 3, 1)), (rb, rh * rw, rc)))
    return ag.concat(cls_parts, axis=1), ag.concat(reg_parts, axis=1)


def batch_loss(cls: ag.Var, reg: ag.Var,
               mined: list[tuple[np.ndarray, np.ndarray]],
               lam: float = LAMBDA_DEFAULT) -> tuple[ag.Var, list[LossBreakdown]]:
    """Mean per-image multitask loss over a batch as one autograd node.

    `mined` holds (labels, reg_targets) per image, labels already mined.
    """
    b = cls.shape[0]
    if len(mined) != b:
        raise ValueError("one (labels, targets) pair per batch image required")
    breakdowns = [_loss_values(cls.data[i], reg.data[i], lab, tgt, lam)
                  for i, (lab, tgt) in enumerate(mined)]
    total = float(np.mean([bd.total for bd in breakdowns]))

    def vjp(gy):
        g = float(gy)
        gcls = np.zeros_like(cls.data)
        greg = np.zeros_like(reg.data)
        for i, (labels, targets) in enumerate(mined):
            bd = breakdowns[i]
            sel = labels != LABEL_IGNORE
            if bd.n_cls:
                logits = cls.data[i]
                p = np.exp(log_softmax2(logits))
                onehot = np.zeros_like(p)
                onehot[np.arange(len(labels)), (labels == LABEL_POS).astype(int)] = 1.0
                gi = (p - onehot) * (lam / bd.n_cls)
                gi[~sel] = 0.0
                gcls[i] = g / b * gi
            pos = labels == LABEL_POS
            if bd.n_reg:
                resid = reg.data[i][pos] - targets[pos]
                greg[i][pos] = g / b * smooth_l1_grad(resid) / bd.n_reg
        return gcls, greg

    return ag.Var(np.float64(total), (cls, reg), vjp), breakdowns
