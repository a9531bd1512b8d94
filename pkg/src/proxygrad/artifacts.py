"""File outputs: CSV tables, binary PGM/PPM images and the run manifest."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def quantize(x) -> np.ndarray:
    """Map intensities in [-1, 1] to bytes via round((v + 1) * 127.5)."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def dequantize(q) -> np.ndarray:
    return np.asarray(q, dtype=np.float64) / 127.5 - 1.0


def write_image(path, x) -> Path:
    """Write a (1, H, W) image as P5 or a (3, H, W) image as P6."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ValueError(f"expected (1|3, H, W) image, got {x.shape}")
    c, h, w = x.shape
    q = quantize(x)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii"))
        fh.write((q[0] if c == 1 else q.transpose(1, 2, 0)).tobytes())
    return path


def read_image(path) -> np.ndarray:
    """Inverse of :func:`write_image`; returns float intensities (C, H, W)."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end].decode("ascii"))
        pos = end
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise ValueError(f"unsupported image header {fields}")
    c = 1 if magic == "P5" else 3
    data = np.frombuffer(raw, dtype=np.uint8, count=c * h * w, offset=pos + 1)
    img = data.reshape(h, w, c).transpose(2, 0, 1)
    return dequantize(img)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
