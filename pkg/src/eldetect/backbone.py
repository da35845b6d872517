"""Small convolutional backbone emitting C2..C5 at strides 4, 8, 16 and 32."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Conv2d, Module
from .tensor import ContractError, Tensor, maxpool2, relu


@dataclass
class BackboneConfig:
    in_channels: int = 1
    stem_channels: int = 32
    widths: tuple[int, int, int, int] = (32, 64, 128, 256)
    blocks_per_stage: int = 2
    input_size: int = 128

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4 or min(self.widths) <= 0:
            raise ValueError(f"need four positive stage widths, got {self.widths}")
        if self.input_size % 32:
            raise ValueError(f"input size must be divisible by 32, got {self.input_size}")


@dataclass
class BackbonePyramid:
    C2: Tensor
    C3: Tensor
    C4: Tensor
    C5: Tensor

    def levels(self) -> list[Tensor]:
        return [self.C2, self.C3, self.C4, self.C5]


class Stage(Module):
    def __init__(self, c_in: int, c_out: int, blocks: int, rng: np.random.Generator):
        self.convs = [Conv2d(c_in, c_out, 3, rng, stride=2)]
        self.convs += [Conv2d(c_out, c_out, 3, rng) for _ in range(blocks - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = relu(conv(x))
        return x


class Backbone(Module):
    """7x7/2 stem and a 2x2 max pool give C2; three stride-2 stages give C3..C5.

    When the stem width differs from the first stage width a 1x1 projection
    brings C2 to ``widths[0]``.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stem = Conv2d(cfg.in_channels, cfg.stem_channels, 7, rng, stride=2, pad=3)
        self.c2_proj = Conv2d(cfg.stem_channels, cfg.widths[0], 1, rng) if cfg.stem_channels != cfg.widths[0] else None
        w = cfg.widths
        self.stages = [Stage(w[i], w[i + 1], cfg.blocks_per_stage, rng) for i in range(3)]

    def __call__(self, image: Tensor) -> BackbonePyramid:
        return extract_pyramid(image, self)


def extract_pyramid(image: Tensor, net: Backbone) -> BackbonePyramid:
    if image.ndim != 3 or image.shape[0] != net.cfg.in_channels:
        raise ContractError(f"expected a {net.cfg.in_channels} x H x W image, got {image.shape}")
    _, h, w = image.shape
    if h % 32 or w % 32:
        raise ContractError(f"image extents {h}x{w} must be divisible by 32; resize first")
    c2 = maxpool2(relu(net.stem(image)))
    if net.c2_proj is not None:
        c2 = relu(net.c2_proj(c2))
    c3 = net.stages[0](c2)
    c4 = net.stages[1](c3)
    c5 = net.stages[2](c4)
    return BackbonePyramid(c2, c3, c4, c5)
