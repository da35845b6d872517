"""Multi-head cosine non-local attention.

Three same-shape feature maps are blended with fixed balance factors, every
spatial position is compared with every other one (cosine or dot-product
affinity), the affinities are softmax-normalised per row, and the resulting
weights aggregate a 1x1-projected copy of the blended map.  A residual add of
the blended map completes the block.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imageio
from .nn import Conv2d, Module
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    add,
    add_n,
    l2_normalize_columns,
    matmul,
    reshape,
    scale,
    softmax_rows,
    transpose,
)

COSINE = "cosine"
DOT = "dot"
MODES = (COSINE, DOT)


class MultiHeadCosineAttention(Module):
    """Attention block parameters: balance factors, value projection g, similarity mode."""

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        mode: str = COSINE,
        alpha: float = 0.5,
        beta: float = 0.5,
        gamma: float = 0.5,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        for v in (alpha, beta, gamma):
            if not np.isfinite(v):
                raise ValueError("balance factors must be finite")
        self.mode = mode
        self.alpha, self.beta, self.gamma = float(alpha), float(beta), float(gamma)
        self.value_proj = Conv2d(channels, channels, 1, rng)

    def __call__(self, X: Tensor, Y: Tensor, Z: Tensor) -> Tensor:
        return attention_apply(fuse_heads(X, Y, Z, self), self)

    def zero_value_proj(self) -> None:
        self.value_proj.weight.data = np.zeros(self.value_proj.weight.shape)
        self.value_proj.bias.data = np.zeros(self.value_proj.bias.shape)


@dataclass
class SimilarityMap:
    values: Tensor
    attention: Tensor


@dataclass
class MapStatistics:
    brightness: float
    contrast: float
    histogram: np.ndarray

    def to_dict(self) -> dict:
        return {
            "brightness": self.brightness,
            "contrast": self.contrast,
            "histogram": [int(v) for v in self.histogram],
        }


def fuse_heads(X: Tensor, Y: Tensor, Z: Tensor, cfg) -> Tensor:
    if not (X.shape == Y.shape == Z.shape):
        raise DimensionError(f"heads must share a shape, got {X.shape}, {Y.shape}, {Z.shape}")
    return add_n(scale(X, cfg.alpha), scale(Y, cfg.beta), scale(Z, cfg.gamma))


def _flatten(x: Tensor) -> Tensor:
    c = x.shape[0]
    return reshape(x, (c, -1))


def similarity(x: Tensor, mode: str = COSINE) -> SimilarityMap:
    """Pairwise affinity between spatial positions of a C x H x W map.

    Cosine mode divides by both column norms; a column with norm below 1e-12
    has zero affinity to everything, itself included.
    """
    if mode not in MODES:
        raise ValueError(f"unknown similarity mode {mode!r}")
    flat = _flatten(x)
    if mode == COSINE:
        flat = l2_normalize_columns(flat)
    f = matmul(transpose(flat), flat)
    return SimilarityMap(values=f, attention=softmax_rows(f))


def attention_apply(x: Tensor, cfg: MultiHeadCosineAttention, return_map: bool = False):
    """y_j = sum_i s[j, i] g(x)_i + x_j, returned with the input's shape.

    With ``return_map`` the similarity map is returned alongside ``y``.
    """
    sim = similarity(x, cfg.mode)
    g = _flatten(cfg.value_proj(x))
    weighted = matmul(g, transpose(sim.attention))
    y = add(reshape(weighted, x.shape), x)
    return (y, sim) if return_map else y


def map_statistics(m) -> MapStatistics:
    """Mean gray level, RMS contrast and a 256-bin min-max histogram."""
    values = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise ContractError("map_statistics needs a non-empty map")
    lo, hi = values.min(), values.max()
    hist = np.zeros(256, dtype=np.int64)
    if hi > lo:
        bins = np.minimum(((values - lo) / (hi - lo) * 256).astype(np.int64), 255)
        np.add.at(hist, bins, 1)
    else:
        hist[0] = values.size
    return MapStatistics(float(values.mean()), float(values.std()), hist)


def to_gray(m) -> np.ndarray:
    """Min-max normalise a map to uint8; constant maps become all zeros."""
    values = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255).astype(np.uint8)


def export_map(m, pgm_path: str | Path, csv_path: str | Path | None = None) -> None:
    values = np.asarray(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    if values.ndim != 2:
        raise DimensionError(f"can only export 2-D maps, got {values.shape}")
    imageio.write_pgm(pgm_path, to_gray(values))
    if csv_path is not None:
        np.savetxt(csv_path, values, delimiter=",", fmt="%.17g")
