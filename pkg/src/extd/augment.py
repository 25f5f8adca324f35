"""Training-time sample augmentation.

Applied in order: photometric jitter (brightness, contrast, saturation,
hue, each with probability 0.5), a random square crop of 0.3-1.0 of the
short side rescaled to the training resolution, then horizontal and
vertical flips.  Boxes follow the geometry; a box survives a crop iff its
center lies inside, and crops that would drop every box are resampled up
to 50 times before falling back to the full frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    boxes: np.ndarray  # (K, 4) float64 xywh


@dataclass(frozen=True)
class AugmentOptions:
    photometric: bool = True
    crop: bool = True
    crop_range: tuple[float, float] = (0.3, 1.0)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5  # vertical flips are on by default
    brightness_delta: float = 32.0 / 255.0
    contrast_range: tuple[float, float] = (0.5, 1.5)
    saturation_range: tuple[float, float] = (0.5, 1.5)
    hue_delta_deg: float = 18.0
    crop_tries: int = 50


# ---------------------------------------------------------------------------
# resize (plain data plumbing, same half-pixel convention as the x2 op)


def _taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
    hi = np.clip(lo + 1, 0, n_in - 1)
    wl = 1.0 - (src - np.floor(src))
    wl[src < 0] = 1.0
    return lo, hi, wl


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) image."""
    c, h, w = image.shape
    rlo, rhi, rwl = _taps(h, out_h)
    clo, chi, cwl = _taps(w, out_w)
    rwl = rwl.astype(image.dtype)[None, :, None]
    cwl = cwl.astype(image.dtype)[None, None, :]
    rows = image[:, rlo, :] * rwl + image[:, rhi, :] * (1 - rwl)
    out = rows[:, :, clo] * cwl + rows[:, :, chi] * (1 - cwl)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# photometric


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[0], img[1], img[2]
    maxc = img.max(axis=0)
    minc = img.min(axis=0)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    safe = np.where(span > 0, span, 1.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc,
                 np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(img: np.ndarray) -> np.ndarray:
    h, s, v = img[0], img[1], img[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def photometric_distort(image: np.ndarray, rng: np.random.Generator,
                        opt: AugmentOptions) -> np.ndarray:
    img = image.astype(np.float64)
    if rng.random() < 0.5:
        img = img + rng.uniform(-opt.brightness_delta, opt.brightness_delta)
        img = np.clip(img, 0.0, 1.0)
    if rng.random() < 0.5:
        img = np.clip(img * rng.uniform(*opt.contrast_range), 0.0, 1.0)
    do_sat = rng.random() < 0.5
    do_hue = rng.random() < 0.5
    if do_sat or do_hue:
        hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
        if do_sat:
            hsv[1] = np.clip(hsv[1] * rng.uniform(*opt.saturation_range), 0, 1)
        if do_hue:
            hsv[0] = (hsv[0] + rng.uniform(-opt.hue_delta_deg,
                                           opt.hue_delta_deg) / 360.0) % 1.0
        img = _hsv_to_rgb(hsv)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# geometry


def _crop_boxes(boxes: np.ndarray, x0: float, y0: float,
                side: float) -> np.ndarray:
    if len(boxes) == 0:
        return boxes.reshape(0, 4)
    cx = boxes[:, 0] + boxes[:, 2] / 2
    cy = boxes[:, 1] + boxes[:, 3] / 2
    keep = (cx >= x0) & (cx < x0 + side) & (cy >= y0) & (cy < y0 + side)
    kept = boxes[keep].copy()
    if len(kept) == 0:
        return kept.reshape(0, 4)
    x1 = np.clip(kept[:, 0] - x0, 0, side)
    y1 = np.clip(kept[:, 1] - y0, 0, side)
    x2 = np.clip(kept[:, 0] + kept[:, 2] - x0, 0, side)
    y2 = np.clip(kept[:, 1] + kept[:, 3] - y0, 0, side)
    out = np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)
    return out[(out[:, 2] > 0) & (out[:, 3] > 0)]


def augment(sample: Sample, out_size: int, rng: np.random.Generator,
            opt: AugmentOptions = AugmentOptions()) -> Sample:
    img, boxes = sample.image, np.asarray(sample.boxes, dtype=np.float64)
    _, h, w = img.shape
    if opt.photometric:
        img = photometric_distort(img, rng, opt)

    if opt.crop:
        short = min(h, w)
        chosen = None
        for _ in range(opt.crop_tries):
            side = int(round(rng.uniform(*opt.crop_range) * short))
            side = max(8, min(side, short))
            x0 = int(rng.integers(0, w - side + 1))
            y0 = int(rng.integers(0, h - side + 1))
            cropped = _crop_boxes(boxes, x0, y0, side)
            if len(cropped) > 0 or len(boxes) == 0:
                chosen = (x0, y0, side, cropped)
                break
        if chosen is None:  # fall back to the largest centered square
            side = short
            x0, y0 = (w - side) // 2, (h - side) // 2
            chosen = (x0, y0, side, _crop_boxes(boxes, x0, y0, side))
        x0, y0, side, boxes = chosen
        img = img[:, y0:y0 + side, x0:x0 + side]
    else:
        side = min(h, w)
        x0, y0 = (w - side) // 2, (h - side) // 2
        img = img[:, y0:y0 + side, x0:x0 + side]
        boxes = _crop_boxes(boxes, x0, y0, side)

    if side != out_size:
        img = resize_bilinear(img, out_size, out_size)
        boxes = boxes * (out_size / side)
    img = np.ascontiguousarray(img)

    if rng.random() < opt.hflip_prob:
        img = img[:, :, ::-1].copy()
        if len(boxes):
            boxes = boxes.copy()
            boxes[:, 0] = out_size - boxes[:, 0] - boxes[:, 2]
    if rng.random() < opt.vflip_prob:
        img = img[:, ::-1, :].copy()
        if len(boxes):
            boxes = boxes.copy()
            boxes[:, 1] = out_size - boxes[:, 1] - boxes[:, 3]

    if len(boxes):  # clamp float roundoff from the rescale/flip arithmetic
        boxes = boxes.copy()
        boxes[:, 0] = np.clip(boxes[:, 0], 0.0, out_size)
        boxes[:, 1] = np.clip(boxes[:, 1], 0.0, out_size)
        boxes[:, 2] = np.minimum(boxes[:, 2], out_size - boxes[:, 0])
        boxes[:, 3] = np.minimum(boxes[:, 3], out_size - boxes[:, 1])
        boxes = boxes[(boxes[:, 2] > 0) & (boxes[:, 3] > 0)]
    return Sample(img.astype(np.float32), boxes)
