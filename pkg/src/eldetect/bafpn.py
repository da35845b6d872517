"""Top-down pyramid and attention-refined bottom-up pyramid.

Top-down merge (lateral 1x1 convs to width d, nearest 2x upsampling, 3x3
output convs)::

    M5 = lat5(C5);  Mk = up(M{k+1}) + latk(Ck);  Pk = smoothk(Mk)

Bottom-up refinement::

    B2 = conv(P2)
    B3 = A(conv(C3), conv(P3), down(B2))
    B4 = A(conv(C4), conv(P4), down(B3))
    B5 = conv(P5) + down(B4)
    B6 = maxpool(B5)

``down`` is a learned 3x3 stride-2 conv and ``A`` the multi-head attention
block (unshared between B3 and B4).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import MODES, MultiHeadCosineAttention, SimilarityMap, attention_apply, fuse_heads
from .backbone import BackbonePyramid
from .nn import Conv2d, Module
from .tensor import DimensionError, Tensor, add, maxpool2, upsample2_nearest

TOPDOWN = "topdown"
BIDIRECTIONAL = "bidirectional"
FPN_MODES = (TOPDOWN, BIDIRECTIONAL)
NONE = "none"
ATTENTION_MODES = (NONE,) + MODES


@dataclass(frozen=True)
class Variant:
    fpn: str = BIDIRECTIONAL
    attention: str = "cosine"

    def __post_init__(self):
        if self.fpn not in FPN_MODES:
            raise ValueError(f"fpn must be one of {FPN_MODES}, got {self.fpn!r}")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")

    @property
    def name(self) -> str:
        return f"{self.fpn}+{self.attention}"

    @classmethod
    def parse(cls, text: str) -> "Variant":
        fpn, _, attn = text.partition("+")
        return cls(fpn, attn or NONE)


ALL_VARIANTS = tuple(Variant(f, a) for f in FPN_MODES for a in ATTENTION_MODES)


@dataclass
class TopDownPyramid:
    P2: Tensor | None
    P3: Tensor | None
    P4: Tensor | None
    P5: Tensor
    # lateral conv outputs per level, reused by the top-down attention variant
    laterals: dict = field(default_factory=dict, repr=False)


@dataclass
class RefinedPyramid:
    B2: Tensor
    B3: Tensor
    B4: Tensor
    B5: Tensor
    B6: Tensor
    similarity: dict[str, SimilarityMap] = field(default_factory=dict, repr=False)

    def levels(self) -> list[Tensor]:
        return [self.B2, self.B3, self.B4, self.B5, self.B6]


class TopDownParams(Module):
    def __init__(self, in_widths, d: int, rng: np.random.Generator):
        self.lateral = [Conv2d(c, d, 1, rng) for c in in_widths]
        self.smooth = [Conv2d(d, d, 3, rng) for _ in in_widths]


class BottomUpParams(Module):
    def __init__(self, in_widths, d: int, rng: np.random.Generator):
        self.b2_conv = Conv2d(d, d, 3, rng)
        self.c3_conv = Conv2d(in_widths[1], d, 1, rng)
        self.c4_conv = Conv2d(in_widths[2], d, 1, rng)
        self.p3_conv = Conv2d(d, d, 3, rng)
        self.p4_conv = Conv2d(d, d, 3, rng)
        self.p5_conv = Conv2d(d, d, 3, rng)
        self.down = [Conv2d(d, d, 3, rng, stride=2) for _ in range(3)]


def _check_halving(big: Tensor, small: Tensor) -> None:
    _, h, w = big.shape
    _, hs, ws = small.shape
    if (hs, ws) != ((h + 1) // 2, (w + 1) // 2) and (hs, ws) != (h // 2, w // 2):
        raise DimensionError(f"pyramid extents {h}x{w} -> {hs}x{ws} are not a halving step")


def top_down(c: BackbonePyramid, params: TopDownParams) -> TopDownPyramid:
    """Lateral + upsample merge from C5 downwards; missing lower levels are skipped."""
    levels = c.levels()
    m = params.lateral[3](levels[3])
    merged = {5: m}
    laterals = {5: m}
    for k in (4, 3, 2):
        ck = levels[k - 2]
        if ck is None:
            break
        _check_halving(ck, m)
        laterals[k] = params.lateral[k - 2](ck)
        m = add(upsample2_nearest(m, ck.shape[1:]), laterals[k])
        merged[k] = m
    out = {k: params.smooth[k - 2](v) for k, v in merged.items()}
    return TopDownPyramid(out.get(2), out.get(3), out.get(4), out[5], laterals=laterals)


def _attend(attn, X, Y, Z, maps, key):
    if attn is None:
        return fuse_heads(X, Y, Z, _HALVES)
    y, sim = attention_apply(fuse_heads(X, Y, Z, attn), attn, return_map=True)
    maps[key] = sim
    return y


@dataclass(frozen=True)
class _Balance:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.5


_HALVES = _Balance()


def bottom_up_refine(
    c: BackbonePyramid,
    p: TopDownPyramid,
    attn3: MultiHeadCosineAttention | None,
    attn4: MultiHeadCosineAttention | None,
    params: BottomUpParams,
) -> RefinedPyramid:
    """Refined levels B2..B6.  ``attn3``/``attn4`` set to None fuse by weighted addition."""
    for big, small in ((p.P2, p.P3), (p.P3, p.P4), (p.P4, p.P5)):
        _check_halving(big, small)
    maps: dict[str, SimilarityMap] = {}
    b2 = params.b2_conv(p.P2)
    b3 = _attend(attn3, params.c3_conv(c.C3), params.p3_conv(p.P3), params.down[0](b2), maps, "B3")
    b4 = _attend(attn4, params.c4_conv(c.C4), params.p4_conv(p.P4), params.down[1](b3), maps, "B4")
    b5 = add(params.p5_conv(p.P5), params.down[2](b4))
    return RefinedPyramid(b2, b3, b4, b5, maxpool2(b5), maps)


class BAFPN(Module):
    """Pyramid fusion for one ablation variant, producing five head levels."""

    def __init__(self, in_widths, d: int, variant: Variant, rng: np.random.Generator):
        self.variant = variant
        self.d = d
        self.top = TopDownParams(in_widths, d, rng)
        self.bottom = BottomUpParams(in_widths, d, rng) if variant.fpn == BIDIRECTIONAL else None
        if variant.attention == NONE:
            self.attn3 = self.attn4 = None
        else:
            self.attn3 = MultiHeadCosineAttention(d, rng, mode=variant.attention)
            self.attn4 = MultiHeadCosineAttention(d, rng, mode=variant.attention)

    def __call__(self, c: BackbonePyramid) -> RefinedPyramid:
        return fuse_variant(c, self)


def fuse_variant(c: BackbonePyramid, net: BAFPN) -> RefinedPyramid:
    """Dispatch on the variant.

    bidirectional: the refined pyramid above (attention or weighted sum).
    topdown: P2..P5 plus maxpool(P5); with attention, P3 and P4 are replaced
    by A(lateral, P, up(next coarser P)).
    """
    p = top_down(c, net.top)
    if net.variant.fpn == BIDIRECTIONAL:
        return bottom_up_refine(c, p, net.attn3, net.attn4, net.bottom)
    if net.attn3 is None:
        return RefinedPyramid(p.P2, p.P3, p.P4, p.P5, maxpool2(p.P5))
    maps: dict[str, SimilarityMap] = {}
    q4 = _attend(net.attn4, p.laterals[4], p.P4, upsample2_nearest(p.P5, p.P4.shape[1:]), maps, "B4")
    q3 = _attend(net.attn3, p.laterals[3], p.P3, upsample2_nearest(q4, p.P3.shape[1:]), maps, "B3")
    return RefinedPyramid(p.P2, q3, q4, p.P5, maxpool2(p.P5), maps)
