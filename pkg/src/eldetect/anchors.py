"""Anchor generation and anchor-to-ground-truth assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import BBox, box_iou, encode

LEVEL_NAMES = ("B2", "B3", "B4", "B5", "B6")
DEFAULT_SIZES = (32, 64, 128, 256, 512)
DEFAULT_RATIOS = (0.5, 1.0, 2.0)


@dataclass
class Anchor:
    box: BBox
    level: str
    ratio: float


@dataclass
class Anchors:
    """Anchors of all levels, ordered by level, row, column, then ratio."""

    boxes: np.ndarray  # (N, 4) corner form
    level: np.ndarray  # (N,) level index into LEVEL_NAMES
    ratio: np.ndarray  # (N,)
    level_counts: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, i: int) -> Anchor:
        return Anchor(BBox.from_corners(*self.boxes[i]), LEVEL_NAMES[self.level[i]], float(self.ratio[i]))


def anchor_shape(size: float, ratio: float) -> tuple[float, float]:
    """(w, h) with h / w = ratio and w * h = size**2."""
    return size / math.sqrt(ratio), size * math.sqrt(ratio)


def generate_anchors(
    level_shapes: list[tuple[int, int]],
    image_size: tuple[int, int],
    sizes=DEFAULT_SIZES,
    ratios=DEFAULT_RATIOS,
) -> Anchors:
    """One anchor per ratio at every cell centre of every level.

    ``level_shapes`` are the (H, W) extents of B2..B6 and ``image_size`` the
    (H, W) of the network input; cell centres map to image coordinates via
    the per-level stride image/extent.
    """
    if len(level_shapes) != len(sizes):
        raise ValueError(f"need {len(sizes)} levels, got {len(level_shapes)}")
    img_h, img_w = image_size
    all_boxes, all_level, all_ratio, counts = [], [], [], []
    for li, ((h, w), size) in enumerate(zip(level_shapes, sizes)):
        sy, sx = img_h / h, img_w / w
        cy, cx = np.meshgrid((np.arange(h) + 0.5) * sy, (np.arange(w) + 0.5) * sx, indexing="ij")
        wh = np.array([anchor_shape(size, r) for r in ratios])  # (A, 2)
        ctr = np.stack([cx, cy], axis=-1)[:, :, None, :]  # (h, w, 1, 2)
        half = wh[None, None, :, :] / 2
        boxes = np.concatenate([ctr - half, ctr + half], axis=-1).reshape(-1, 4)
        all_boxes.append(boxes)
        all_level.append(np.full(len(boxes), li))
        all_ratio.append(np.tile(np.asarray(ratios, dtype=np.float64), h * w))
        counts.append(len(boxes))
    return Anchors(np.concatenate(all_boxes), np.concatenate(all_level), np.concatenate(all_ratio), counts)


@dataclass
class LossConfig:
    lam: float = 10.0
    n_cls: float = 256.0
    n_reg: float = 2400.0
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    batch_size: int = 256
    positive_fraction: float = 0.5

    def __post_init__(self):
        for name in ("lam", "n_cls", "n_reg", "pos_iou", "neg_iou", "batch_size", "positive_fraction"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class Assignment:
    labels: np.ndarray  # after sampling: 1 positive, 0 negative, -1 ignored
    full_labels: np.ndarray  # before sampling
    targets: np.ndarray  # (N, 4), meaningful where full_labels == 1
    matched_gt: np.ndarray  # (N,) index of best gt, -1 without gt

    @property
    def sampled(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)


def assign_targets(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    cfg: LossConfig | None = None,
    rng: np.random.Generator | None = None,
) -> Assignment:
    """Label anchors against ground truth and draw the training minibatch.

    Positive: IoU >= pos_iou with some gt, or the highest-IoU anchor(s) of a
    gt.  Negative: best IoU < neg_iou.  Otherwise ignored.  Positives are
    encoded to their best-IoU gt.  The minibatch holds at most
    ``batch_size * positive_fraction`` positives and is filled with negatives.
    """
    cfg = cfg or LossConfig()
    rng = rng or np.random.default_rng(0)
    anchors = np.asarray(anchors, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    if n == 0:
        raise ValueError("assign_targets needs at least one anchor")
    full = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4))
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        full[:] = 0
    else:
        ious = box_iou(anchors, gt_boxes)
        matched = ious.argmax(axis=1)
        best = ious[np.arange(n), matched]
        full[best < cfg.neg_iou] = 0
        full[best >= cfg.pos_iou] = 1
        gt_best = ious.max(axis=0)
        for g in range(len(gt_boxes)):
            if gt_best[g] > 0:
                full[ious[:, g] == gt_best[g]] = 1
        pos = full == 1
        targets[pos] = encode(gt_boxes[matched[pos]], anchors[pos])
    labels = np.full(n, -1, dtype=np.int64)
    pos_idx = np.flatnonzero(full == 1)
    neg_idx = np.flatnonzero(full == 0)
    n_pos = min(len(pos_idx), int(cfg.batch_size * cfg.positive_fraction))
    n_neg = min(len(neg_idx), cfg.batch_size - n_pos)
    if n_pos:
        labels[rng.choice(pos_idx, size=n_pos, replace=False)] = 1
    if n_neg:
        labels[rng.choice(neg_idx, size=n_neg, replace=False)] = 0
    return Assignment(labels, full, targets, matched)
