"""Synthetic training data: ellipse "faces" over textured noise.

Each image carries 1-5 non-overlapping faces (filled ellipse, two darker
eye dots, a mouth arc) with box height drawn uniformly from
[8, resolution/2], so the scale histogram spreads across several anchor
ranges.  Generation is a pure function of the seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .anchors import iou_matrix
from .fileio import DatasetIndex, format_annotations, save_pbm

MIN_FACE = 8


def _textured_background(res: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.15, 0.5)
    img = np.full((3, res, res), base, dtype=np.float64)
    img += rng.normal(0.0, rng.uniform(0.03, 0.08), size=(3, res, res))
    # a few soft rectangles for structure
    for _ in range(rng.integers(2, 6)):
        x0, y0 = rng.integers(0, res, 2)
        w = int(rng.integers(res // 8, res // 2))
        h = int(rng.integers(res // 8, res // 2))
        tint = rng.uniform(-0.12, 0.12, size=(3, 1, 1))
        img[:, y0:y0 + h, x0:x0 + w] += tint
    return np.clip(img, 0.0, 1.0)


def _render_face(img: np.ndarray, box: np.ndarray,
                 rng: np.random.Generator) -> None:
    x, y, w, h = box
    cx, cy = x + w / 2.0, y + h / 2.0
    rx, ry = w / 2.0, h / 2.0
    res = img.shape[1]
    yy, xx = np.mgrid[0:res, 0:res]
    face_color = np.array([rng.uniform(0.70, 0.95), rng.uniform(0.55, 0.80),
                           rng.uniform(0.40, 0.65)])[:, None, None]
    dark = rng.uniform(0.02, 0.18)

    inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
    img[:, inside] = face_color[:, 0]

    eye_r = max(0.9, 0.13 * ry)
    for ex in (cx - 0.38 * rx, cx + 0.38 * rx):
        ey = cy - 0.30 * ry
        eye = (xx - ex) ** 2 + (yy - ey) ** 2 <= eye_r ** 2
        img[:, eye & inside] = dark

    # mouth: lower arc band of an ellipse
    mr = ((xx - cx) / (0.55 * rx)) ** 2 + ((yy - (cy + 0.25 * ry)) / (0.45 * ry)) ** 2
    mouth = (mr >= 0.55) & (mr <= 1.0) & (yy > cy + 0.30 * ry)
    img[:, mouth & inside] = dark


def _sample_boxes(res: int, rng: np.random.Generator) -> np.ndarray:
    count = int(rng.integers(1, 6))
    boxes: list[np.ndarray] = []
    for _ in range(count):
        for _ in range(40):
            size = rng.uniform(MIN_FACE, res / 2.0)
            aspect = rng.uniform(max(0.72, MIN_FACE / size), 1.0)
            w, h = size * aspect, size
            x = rng.uniform(0, res - w)
            y = rng.uniform(0, res - h)
            cand = np.array([x, y, w, h])
            if not boxes or iou_matrix(cand[None], np.stack(boxes)).max() < 0.05:
                boxes.append(cand)
                break
    return np.stack(boxes)


def synth_sample(res: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (image, boxes) pair; image (3, res, res) float32 in [0, 1]."""
    img = _textured_background(res, rng)
    boxes = _sample_boxes(res, rng)
    order = np.argsort(-boxes[:, 3])  # draw large faces first
    for i in order:
        _render_face(img, boxes[i], rng)
    return np.clip(img, 0.0, 1.0).astype(np.float32), boxes


def synth_generate(count: int, resolution: int, seed: int,
                   out_dir: str | Path) -> DatasetIndex:
    """Write `count` P6 images plus an annotations.txt; returns the index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    entries = []
    for i in range(count):
        img, boxes = synth_sample(resolution, rng)
        name = f"img{i:05d}.ppm"
        save_pbm(out / name, img)
        entries.append((name, boxes))
    index = DatasetIndex(entries)
    (out / "annotations.txt").write_text(format_annotations(index),
                                         encoding="utf-8")
    return index
