"""Binary PPM (P6) and PGM (P5) image files, maxval 255.

Float images in [0,1] quantize via round(255 * v) after clamping.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray):
    h, w, c = rgb.shape
    if c != 3:
        raise ValueError("PPM wants an HxWx3 image")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(rgb).tobytes())


def write_pgm(path, gray: np.ndarray):
    if gray.ndim != 2:
        raise ValueError("PGM wants an HxW image")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(gray).tobytes())


def _read_header(raw: bytes, magic: bytes):
    m = re.match(magic + rb"\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m:
        raise ValueError(f"not a {magic.decode()} file")
    w, h, maxval = int(m.group(1)), int(m.group(2)), int(m.group(3))
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return w, h, m.end()


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, off = _read_header(raw, rb"P6")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=off)
    return data.reshape(h, w, 3).astype(np.float32) / 255.0


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, off = _read_header(raw, rb"P5")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=off)
    return data.reshape(h, w).astype(np.float32) / 255.0
