"""Independent oracles kept free of any package fast paths.

The convolution reference is the direct six-nested-loop definition; the
matcher below replays the two-stage assignment rule with plain per-pair
loops.  Both are deliberately slow and simple so the shipped kernels are
checked against something that shares no code with them.
"""

import numpy as np


def naive_conv2d(x, w, stride=1, padding=0, groups=1):
    n, c, h, wd = x.shape
    out_c, cg, kh, kw = w.shape
    og = out_c // groups
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    y = np.zeros((n, out_c, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for o in range(out_c):
            g = o // og
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cg):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (w[o, ci, ki, kj] *
                                        xp[ni, g * cg + ci,
                                           i * stride + ki, j * stride + kj])
                    y[ni, o, i, j] = acc
    return y


def naive_iou(a, b):
    ax1, ay1, ax2, ay2 = a[0], a[1], a[0] + a[2], a[1] + a[3]
    bx1, by1, bx2, by2 = b[0], b[1], b[0] + b[2], b[1] + b[3]
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def naive_match(gts, anchors, t1=0.35, t2=0.1):
    """Two-stage scale-compensated matching, all-pairs loops.

    Returns (labels, matched_gt) with labels 1 positive / 0 negative.
    """
    na, ng = len(anchors), len(gts)
    labels = [0] * na
    matched = [-1] * na
    if ng == 0:
        return np.array(labels), np.array(matched)
    ov = [[naive_iou(anchors[a], gts[g]) for g in range(ng)] for a in range(na)]

    for a in range(na):  # stage 1 threshold
        best_g, best_v = 0, ov[a][0]
        for g in range(1, ng):
            if ov[a][g] > best_v:
                best_g, best_v = g, ov[a][g]
        if best_v >= t1:
            labels[a] = 1
            matched[a] = best_g

    for g in range(ng):  # best free anchor for unmatched gts
        if any(matched[a] == g for a in range(na)):
            continue
        best_a, best_v = -1, -1.0
        for a in range(na):
            if labels[a] != 1 and ov[a][g] > best_v:
                best_a, best_v = a, ov[a][g]
        if best_a >= 0:
            labels[best_a] = 1
            matched[best_a] = g

    counts = [sum(1 for a in range(na) if matched[a] == g) for g in range(ng)]
    avg = max(1, sum(counts) // ng)
    for g in range(ng):  # stage 2 top-up above t2
        need = avg - counts[g]
        while need > 0:
            best_a, best_v = -1, t2
            for a in range(na):
                if labels[a] != 1 and ov[a][g] > best_v:
                    best_a, best_v = a, ov[a][g]
            if best_a < 0:
                break
            labels[best_a] = 1
            matched[best_a] = g
            counts[g] += 1
            need -= 1
    return np.array(labels), np.array(matched)


def naive_nms(boxes, scores, thresh):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept, removed = [], set()
    for i in order:
        if i in removed:
            continue
        kept.append(i)
        for j in order:
            if j not in removed and j != i and naive_iou(boxes[i], boxes[j]) > thresh:
                removed.add(j)
    return kept
