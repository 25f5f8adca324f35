"""File formats: NetPBM images, binary weight files, annotations, configs,
detection/PR/trace text outputs.

The weight file is magic "EXTD", little-endian throughout: u32 version (1),
u32 tensor count, then per tensor u16 name length, UTF-8 name, u8 rank,
u32 dims, u8 element kind (0 float32, 1 float64) and the raw buffer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detect import Detection, EvalReport
from .model import (DEFAULT_DEPTH, DEFAULT_EXPANSION, ModelConfig,
                    default_config)

WEIGHT_MAGIC = b"EXTD"
WEIGHT_VERSION = 1


class FormatError(ValueError):
    """Malformed file content (maps to exit code 2 in the CLI)."""


# ---------------------------------------------------------------------------
# NetPBM (P5 / P6, maxval 255)


def load_pbm(path: str | Path) -> np.ndarray:
    """Read a P6 (color) or P5 (gray, replicated) image as (3, H, W) in [0,1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: bad magic {magic!r}, want P5 or P6")
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: non-numeric header token {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported, want 255")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raw = data[pos:pos + need]
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload "
                          f"({len(raw)} of {need} bytes)")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
    img = img.transpose(2, 0, 1).astype(np.float32) / 255.0
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    return np.ascontiguousarray(img)


def save_pbm(path: str | Path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0,1] as binary P6."""
    _, h, w = image.shape
    raw = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(raw.transpose(1, 2, 0).tobytes())


load_image = load_pbm


# ---------------------------------------------------------------------------
# weight files


_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_KIND_REV = {0: np.float32, 1: np.float64}


def save_weights(path: str | Path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<II", WEIGHT_VERSION, len(params)))
        for name, tensor in params.items():
            if tensor.dtype not in _KIND:
                raise ValueError(f"{name}: dtype {tensor.dtype} not storable")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            f.write(struct.pack("<B", _KIND[tensor.dtype]))
            f.write(np.ascontiguousarray(tensor).astype(
                tensor.dtype.newbyteorder("<")).tobytes())


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != WEIGHT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 12
    params: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            (kind,) = struct.unpack_from("<B", data, pos)
            pos += 1
            if kind not in _KIND_REV:
                raise FormatError(f"{path}: unknown element kind {kind}")
            dtype = np.dtype(_KIND_REV[kind]).newbyteorder("<")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(data[pos:pos + nbytes], dtype=dtype)
            pos += nbytes
            if name in params:
                raise FormatError(f"{path}: duplicate tensor name {name!r}")
            params[name] = np.ascontiguousarray(
                arr.reshape(dims).astype(dtype.newbyteorder("=")))
    except struct.error as e:
        raise FormatError(f"{path}: truncated weight file ({e})") from None
    return params


# ---------------------------------------------------------------------------
# annotations (image path, box count, then x y w h [extra columns ignored])


@dataclass
class DatasetIndex:
    entries: list[tuple[str, np.ndarray]]  # (image path, (K, 4) boxes)
    dropped: int = 0                       # boxes discarded for w<=0 or h<=0


def parse_annotations(text: str) -> DatasetIndex:
    lines = text.splitlines()
    entries: list[tuple[str, np.ndarray]] = []
    dropped = 0
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        path = lines[i].strip()
        if i + 1 >= len(lines):
            raise FormatError(f"line {i + 2}: missing box count for {path!r}")
        count_line = lines[i + 1].strip()
        try:
            count = int(count_line)
        except ValueError:
            raise FormatError(
                f"line {i + 2}: malformed box count {count_line!r}") from None
        if count < 0:
            raise FormatError(f"line {i + 2}: negative box count")
        boxes = []
        for j in range(count):
            ln = i + 2 + j
            if ln >= len(lines) or not lines[ln].strip():
                raise FormatError(f"line {ln + 1}: truncated record for "
                                  f"{path!r} ({j} of {count} boxes)")
            fields = lines[ln].split()
            if len(fields) < 4:
                raise FormatError(f"line {ln + 1}: expected at least 4 "
                                  f"numbers, got {len(fields)}")
            try:
                x, y, w, h = (float(v) for v in fields[:4])
            except ValueError:
                raise FormatError(
                    f"line {ln + 1}: non-numeric field in {lines[ln]!r}") from None
            if w <= 0 or h <= 0:
                dropped += 1
            else:
                boxes.append((x, y, w, h))
        entries.append((path, np.array(boxes, dtype=np.float64).reshape(-1, 4)))
        i += 2 + count
    return DatasetIndex(entries, dropped)


def format_annotations(index: DatasetIndex) -> str:
    out = []
    for path, boxes in index.entries:
        out.append(path)
        out.append(str(len(boxes)))
        for x, y, w, h in boxes:
            out.append(f"{x:.2f} {y:.2f} {w:.2f} {h:.2f}")
    return "\n".join(out) + ("\n" if out else "")


# ---------------------------------------------------------------------------
# detection / PR / eval text formats


def format_detections(name: str, dets: list[Detection]) -> str:
    lines = [name, str(len(dets))]
    for d in dets:
        x, y, w, h = d.box
        lines.append(f"{x:.4f} {y:.4f} {w:.4f} {h:.4f} {d.score:.4f}")
    return "\n".join(lines) + "\n"


def parse_detections(text: str) -> list[tuple[str, list[Detection]]]:
    lines = text.splitlines()
    out: list[tuple[str, list[Detection]]] = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        name = lines[i].strip()
        try:
            count = int(lines[i + 1].strip())
        except (IndexError, ValueError):
            raise FormatError(
                f"line {i + 2}: malformed detection count") from None
        dets = []
        for j in range(count):
            ln = i + 2 + j
            try:
                x, y, w, h, score = (float(v) for v in lines[ln].split()[:5])
            except (IndexError, ValueError):
                raise FormatError(
                    f"line {ln + 1}: malformed detection line") from None
            dets.append(Detection(np.array([x, y, w, h]), score, 0))
        out.append((name, dets))
        i += 2 + count
    return out


def format_pr_curve(report: EvalReport) -> str:
    lines = []
    n = len(report.pr_points)
    for k, (recall, precision) in enumerate(report.pr_points):
        threshold = (n - k) / n
        lines.append(f"{threshold:.3f} {precision:.6f} {recall:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# config text format: `key = value` lines


_CONFIG_KEYS = ("variant", "width", "depth", "activation", "levels",
                "expansion", "seed", "bn_per_pass")


def parse_config(text: str) -> tuple[ModelConfig, int]:
    """Parse `key = value` lines into (ModelConfig, seed)."""
    values: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {ln}: expected `key = value`, "
                              f"got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise FormatError(f"line {ln}: unknown key {key!r}")
        if key in values:
            raise FormatError(f"line {ln}: duplicate key {key!r}")
        values[key] = value
    try:
        variant = values.get("variant", "fpn")
        width = int(values.get("width", 32))
        depth = int(values["depth"]) if "depth" in values \
            else DEFAULT_DEPTH.get(width, 8)
        if "expansion" in values:
            expansion = tuple(int(v) for v in values["expansion"].split(","))
        else:
            expansion = DEFAULT_EXPANSION.get(
                width, (1,) + (2,) * 5 + (1, 1))[:depth]
        config = ModelConfig(
            variant=variant, width=width, depth=depth,
            activation=values.get("activation", "prelu"),
            expansion=expansion, levels=int(values.get("levels", 6)),
            bn_per_pass=values.get("bn_per_pass", "off").lower()
            in ("1", "true", "on", "yes"))
        seed = int(values.get("seed", 0))
    except ValueError as e:
        raise FormatError(f"bad config value: {e}") from None
    return config, seed


def load_config(path: str | Path) -> tuple[ModelConfig, int]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(config: ModelConfig, seed: int = 0) -> str:
    lines = [
        f"variant = {config.variant}",
        f"width = {config.width}",
        f"depth = {config.depth}",
        f"activation = {config.activation}",
        f"levels = {config.levels}",
        f"expansion = {','.join(str(e) for e in config.expansion)}",
        f"seed = {seed}",
    ]
    if config.bn_per_pass:
        lines.append("bn_per_pass = on")
    return "\n".join(lines) + "\n"


def load_dataset(index: DatasetIndex, root: str | Path) -> list:
    """Materialize (image, boxes) samples; every image must decode."""
    from .augment import Sample
    root = Path(root)
    samples = []
    for rel, boxes in index.entries:
        p = Path(rel)
        samples.append(Sample(load_pbm(p if p.is_absolute() else root / p),
                              boxes))
    return samples
