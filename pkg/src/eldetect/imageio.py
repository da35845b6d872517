"""Binary PGM (P5, 8-bit) reading and writing, plus a small resize helper."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM writer expects a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


# magic, then width, height and maxval separated by whitespace or comment lines
_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    m = _HEADER.match(blob)
    if m is None:
        raise ValueError(f"{path}: malformed PGM header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    if len(blob) - m.end() < w * h:
        raise ValueError(f"{path}: truncated pixel data ({len(blob) - m.end()} of {w * h} bytes)")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=m.end())
    return data.reshape(h, w).copy()


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize a 2-D float image to (H, W) with half-pixel-centred bilinear sampling."""
    h, w = image.shape
    th, tw = size
    if (h, w) == (th, tw):
        return image.astype(np.float64)
    ys = np.clip((np.arange(th) + 0.5) * h / th - 0.5, 0, h - 1)
    xs = np.clip((np.arange(tw) + 0.5) * w / tw - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    img = image.astype(np.float64)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy
