"""Axis-aligned boxes: IoU, regression encoding and non-maximum suppression.

Scalar helpers work on :class:`BBox` (centre form); the vectorised ones work
on ``(N, 4)`` float arrays in corner form ``[x_min, y_min, x_max, y_max]``.
Areas are continuous (``x_max - x_min``, no +1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError

CLASSES = ("crack", "finger_interruption", "black_core")
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}

# exp() guard for decoded widths, log(1000 / 16) as in common Faster R-CNN code
MAX_LOG_RATIO = math.log(1000.0 / 16)


@dataclass
class BBox:
    x: float
    y: float
    w: float
    h: float
    cls: int | None = None
    score: float | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2, **kw) -> "BBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1, **kw)

    def corners(self) -> np.ndarray:
        return np.array([self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2])

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass
class Detection:
    box: BBox
    class_id: int
    score: float
    image_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"score must lie in [0, 1], got {self.score}")
        if not 0 <= self.class_id < len(CLASSES):
            raise ContractError(f"unknown class id {self.class_id}")

    @property
    def class_name(self) -> str:
        return CLASSES[self.class_id]


def iou(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def box_area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix between corner-form box arrays (len(a) x len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return np.stack([boxes[:, 0] + w / 2, boxes[:, 1] + h / 2, w, h], axis=1)


def to_corners(cxcywh: np.ndarray) -> np.ndarray:
    x, y, w, h = cxcywh.T
    return np.stack([x - w / 2, y - h / 2, x + w / 2, y + h / 2], axis=1)


def encode(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Regression targets (t_x, t_y, t_w, t_h) of corner-form ``gt`` w.r.t. ``anchors``."""
    g = to_center(gt)
    a = to_center(anchors)
    if np.any(a[:, 2:] <= 0) or np.any(g[:, 2:] <= 0):
        raise ContractError("encode needs boxes with positive width and height")
    return np.stack(
        [
            (g[:, 0] - a[:, 0]) / a[:, 2],
            (g[:, 1] - a[:, 1]) / a[:, 3],
            np.log(g[:, 2] / a[:, 2]),
            np.log(g[:, 3] / a[:, 3]),
        ],
        axis=1,
    )


def decode(t: np.ndarray, anchors: np.ndarray, max_log_ratio: float | None = None) -> np.ndarray:
    """Inverse of :func:`encode`; returns corner-form boxes.

    ``max_log_ratio`` caps the size terms before exponentiation, which keeps
    untrained regressors from producing overflowing boxes.  Left as ``None``
    the inverse is exact.
    """
    a = to_center(anchors)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    tw, th = t[:, 2], t[:, 3]
    if max_log_ratio is not None:
        tw, th = np.minimum(tw, max_log_ratio), np.minimum(th, max_log_ratio)
    c = np.stack(
        [t[:, 0] * a[:, 2] + a[:, 0], t[:, 1] * a[:, 3] + a[:, 1], a[:, 2] * np.exp(tw), a[:, 3] * np.exp(th)],
        axis=1,
    )
    return to_corners(c)


def encode_bbox(gt: BBox, anchor) -> tuple[float, float, float, float]:
    box = anchor.box if hasattr(anchor, "box") else anchor
    if gt.w <= 0 or gt.h <= 0 or box.w <= 0 or box.h <= 0:
        raise ContractError("encode_bbox needs positive extents")
    return (
        (gt.x - box.x) / box.w,
        (gt.y - box.y) / box.h,
        math.log(gt.w / box.w),
        math.log(gt.h / box.h),
    )


def decode_bbox(t, anchor) -> BBox:
    box = anchor.box if hasattr(anchor, "box") else anchor
    tx, ty, tw, th = t
    return BBox(tx * box.w + box.x, ty * box.h + box.y, box.w * math.exp(tw), box.h * math.exp(th))


def clip_boxes(boxes: np.ndarray, height: float, width: float) -> np.ndarray:
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy class-agnostic NMS; returns kept indices in descending score order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    boxes = np.asarray(boxes, dtype=np.float64)
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    areas = box_area(boxes)
    for pos, i in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(i)
        rest = order[pos + 1 :]
        if rest.size == 0:
            break
        lt = np.maximum(boxes[i, :2], boxes[rest, :2])
        rb = np.minimum(boxes[i, 2:], boxes[rest, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[:, 0] * wh[:, 1]
        ious = inter / (areas[i] + areas[rest] - inter)
        suppressed[pos + 1 :] |= ious >= iou_threshold
    return np.asarray(keep, dtype=np.int64)


def batched_nms(boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Per-label NMS; kept indices sorted by descending score."""
    keep = []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        keep.extend(idx[nms_indices(boxes[idx], scores[idx], iou_threshold)])
    keep = np.asarray(keep, dtype=np.int64)
    return keep[np.argsort(-scores[keep], kind="stable")] if keep.size else keep


def nms(dets: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy descending-score suppression within each class."""
    if not dets:
        return []
    boxes = np.stack([d.box.corners() for d in dets])
    scores = np.array([d.score for d in dets])
    labels = np.array([d.class_id for d in dets])
    return [dets[i] for i in batched_nms(boxes, scores, labels, iou_threshold)]
