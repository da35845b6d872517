"""Region proposal head, its loss, RoI feature pooling and the box head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .anchors import LossConfig
from .boxes import CLASSES
from .nn import Conv2d, Linear, Module
from .tensor import (
    DTYPE,
    DimensionError,
    Tensor,
    add,
    clamp,
    concat,
    getitem,
    log,
    log_softmax_rows,
    make_op,
    mul,
    neg,
    relu,
    reshape,
    scale,
    smooth_l1 as smooth_l1_op,
    tsum,
    transpose,
)

NUM_CLASSES = len(CLASSES)
P_CLAMP = 1e-12


def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


@dataclass
class LossBreakdown:
    total: float
    cls: float
    reg: float
    num_pos: int
    num_sampled: int


def binary_log_loss(p: Tensor, labels: np.ndarray) -> Tensor:
    """Summed two-class log loss; probabilities are clamped to [1e-12, 1 - 1e-12]."""
    pc = clamp(p, P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(labels, dtype=DTYPE)
    one_minus = add(neg(pc), Tensor(np.ones(pc.shape)))
    ll = add(mul(log(pc), y), mul(log(one_minus), 1.0 - y))
    return neg(tsum(ll))


def rpn_loss(p: Tensor, t: Tensor, p_star: np.ndarray, t_star: np.ndarray, cfg: LossConfig | None = None):
    """Objectness log loss over N_cls plus lambda-weighted smooth-L1 over N_reg.

    ``p`` (M,) and ``t`` (M, 4) are predictions for the sampled anchors,
    ``p_star`` in {0, 1} and ``t_star`` their targets.  The regression sum only
    visits anchors with p* = 1, so it is exactly zero without positives.
    Returns the scalar loss and a :class:`LossBreakdown`.
    """
    cfg = cfg or LossConfig()
    p_star = np.asarray(p_star)
    if p.shape[0] != len(p_star) or t.shape[0] != len(p_star):
        raise DimensionError("prediction and target lists are not aligned")
    cls = scale(binary_log_loss(p, p_star), 1.0 / cfg.n_cls)
    pos = np.flatnonzero(p_star == 1)
    if pos.size:
        diff = add(getitem(t, pos), Tensor(-np.asarray(t_star, dtype=DTYPE)[pos]))
        reg = scale(tsum(smooth_l1_op(diff)), cfg.lam / cfg.n_reg)
        total = add(cls, reg)
    else:
        reg = Tensor(0.0)
        total = cls
    info = LossBreakdown(total.item(), cls.item(), reg.item(), int(pos.size), int(len(p_star)))
    return total, info


class RPNHead(Module):
    """Shared 3x3 conv + ReLU, then 1x1 objectness logits and 1x1 box deltas per level."""

    def __init__(self, d: int, num_anchors: int, rng: np.random.Generator):
        self.num_anchors = num_anchors
        self.conv = Conv2d(d, d, 3, rng)
        self.cls = Conv2d(d, num_anchors, 1, rng)
        self.reg = Conv2d(d, 4 * num_anchors, 1, rng)

    def __call__(self, levels: list[Tensor]) -> tuple[Tensor, Tensor]:
        """Objectness logits (N,) and deltas (N, 4), ordered level, row, column, ratio."""
        logits, deltas = [], []
        a = self.num_anchors
        for x in levels:
            h = relu(self.conv(x))
            _, H, W = h.shape
            logits.append(reshape(transpose(self.cls(h), (1, 2, 0)), (-1,)))
            r = reshape(self.reg(h), (a, 4, H, W))
            deltas.append(reshape(transpose(r, (2, 3, 0, 1)), (-1, 4)))
        return concat(logits, 0), concat(deltas, 0)


def roi_level(boxes: np.ndarray, k0: int = 4, canonical: float = 224.0, k_min: int = 2, k_max: int = 5) -> np.ndarray:
    """Pyramid level floor(k0 + log2(sqrt(wh) / canonical)), clamped to [k_min, k_max]."""
    w = np.maximum(boxes[:, 2] - boxes[:, 0], 1e-6)
    h = np.maximum(boxes[:, 3] - boxes[:, 1], 1e-6)
    k = np.floor(k0 + np.log2(np.sqrt(w * h) / canonical))
    return np.clip(k, k_min, k_max).astype(np.int64)


def roi_bins(lo: float, hi: float, stride: float, extent: int, S: int) -> tuple[np.ndarray, np.ndarray]:
    """Integer [start, end) cell ranges of the S bins covering one box side."""
    c0 = int(math.floor(lo / stride))
    c1 = int(math.ceil(hi / stride))
    c0 = min(max(c0, 0), extent - 1)
    c1 = min(max(c1, c0 + 1), extent)
    n = c1 - c0
    j = np.arange(S)
    start = c0 + (j * n) // S
    end = c0 + -((-(j + 1) * n) // S)
    return start, end


def roi_pool(features: Tensor, boxes: np.ndarray, stride: float, S: int = 7) -> Tensor:
    """Max-pool each box's region of a d x H x W map onto an S x S grid -> (R, d, S, S).

    The region is the cell range [floor(x1/stride), ceil(x2/stride)) clamped
    to the map (at least one cell); bin j spans cells
    [floor(j n / S), ceil((j + 1) n / S)) of the n-cell region.
    """
    if features.ndim != 3:
        raise DimensionError(f"roi_pool expects d x H x W features, got {features.shape}")
    d, H, W = features.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    R = len(boxes)
    out = np.empty((R, d, S, S))
    routes = []
    fd = features.data
    for r, (x1, y1, x2, y2) in enumerate(boxes):
        ys, ye = roi_bins(y1, y2, stride, H, S)
        xs, xe = roi_bins(x1, x2, stride, W, S)
        ly = int((ye - ys).max())
        lx = int((xe - xs).max())
        ry = np.minimum(ys[:, None] + np.arange(ly)[None, :], ye[:, None] - 1)  # (S, ly)
        rx = np.minimum(xs[:, None] + np.arange(lx)[None, :], xe[:, None] - 1)  # (S, lx)
        rows = np.broadcast_to(ry[:, None, :, None], (S, S, ly, lx)).reshape(S, S, -1)
        cols = np.broadcast_to(rx[None, :, None, :], (S, S, ly, lx)).reshape(S, S, -1)
        vals = fd[:, rows, cols]  # (d, S, S, ly*lx)
        arg = vals.argmax(axis=3)
        out[r] = np.take_along_axis(vals, arg[..., None], axis=3)[..., 0]
        sel_rows = np.take_along_axis(np.broadcast_to(rows, vals.shape), arg[..., None], axis=3)[..., 0]
        sel_cols = np.take_along_axis(np.broadcast_to(cols, vals.shape), arg[..., None], axis=3)[..., 0]
        routes.append((sel_rows, sel_cols))
    chan = np.broadcast_to(np.arange(d)[:, None, None], (d, S, S))

    def backward(g):
        full = np.zeros(fd.shape, dtype=DTYPE)
        for r, (sr, sc) in enumerate(routes):
            np.add.at(full, (chan, sr, sc), g[r])
        return (full,)

    return make_op(out, (features,), backward, "roi_pool")


def roi_resize(levels: list[Tensor], strides: list[float], boxes: np.ndarray, S: int = 7,
               image_size: tuple[int, int] | None = None) -> tuple[Tensor, np.ndarray]:
    """Pool every box from its assigned level (B2..B5 by the FPN size rule).

    Boxes are clipped to ``image_size`` first.  Returns the (R, d, S, S)
    features and the permutation applied to ``boxes`` (outputs are grouped
    by level).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if image_size is not None:
        h, w = image_size
        boxes = boxes.copy()
        boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
        boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
    lv = roi_level(boxes, k_max=min(5, len(levels) + 1))
    order, parts = [], []
    for k in np.unique(lv):
        idx = np.flatnonzero(lv == k)
        order.append(idx)
        parts.append(roi_pool(levels[k - 2], boxes[idx], strides[k - 2], S))
    perm = np.concatenate(order) if order else np.zeros(0, dtype=np.int64)
    return (concat(parts, 0) if len(parts) > 1 else parts[0]), perm


class SecondStage(Module):
    """flatten -> FC -> ReLU -> FC -> ReLU -> (K+1 class logits, 4K deltas)."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, num_classes: int = NUM_CLASSES):
        self.num_classes = num_classes
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.cls_score = Linear(hidden, num_classes + 1, rng)
        self.bbox_pred = Linear(hidden, 4 * num_classes, rng)

    def __call__(self, roi_feats: Tensor) -> tuple[Tensor, Tensor]:
        x = reshape(roi_feats, (roi_feats.shape[0], -1))
        x = relu(self.fc2(relu(self.fc1(x))))
        return self.cls_score(x), self.bbox_pred(x)


def second_stage(roi_feats: Tensor, params: SecondStage) -> tuple[Tensor, Tensor]:
    return params(roi_feats)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def box_head_loss(logits: Tensor, deltas: Tensor, labels: np.ndarray, targets: np.ndarray) -> tuple[Tensor, dict]:
    """Mean cross-entropy over K+1 classes plus smooth-L1 on the true class's deltas.

    ``labels`` use 0 for background and c+1 for class c; ``targets`` (R, 4)
    are already normalised regression targets.  The regression sum is
    divided by the number of sampled RoIs.
    """
    R = len(labels)
    lsm = log_softmax_rows(logits)
    ce = scale(tsum(getitem(lsm, (np.arange(R), labels))), -1.0 / R)
    fg = np.flatnonzero(labels > 0)
    if fg.size:
        cols = 4 * (labels[fg] - 1)[:, None] + np.arange(4)[None, :]
        sel = getitem(deltas, (fg[:, None], cols))
        diff = add(sel, Tensor(-targets[fg]))
        reg = scale(tsum(smooth_l1_op(diff)), 1.0 / R)
        total = add(ce, reg)
    else:
        reg = Tensor(0.0)
        total = ce
    return total, {"cls": ce.item(), "reg": reg.item(), "num_fg": int(fg.size), "num_rois": R}
