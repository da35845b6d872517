"""Two-stage detector: backbone -> pyramid fusion -> RPN -> RoI pooling -> box head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .anchors import DEFAULT_RATIOS, DEFAULT_SIZES, Anchors, LossConfig, assign_targets, generate_anchors
from .bafpn import BAFPN, RefinedPyramid, Variant
from .backbone import Backbone, BackboneConfig
from .boxes import MAX_LOG_RATIO, BBox, Detection, batched_nms, box_iou, clip_boxes, decode, encode, nms_indices
from .head import RPNHead, SecondStage, box_head_loss, roi_resize, rpn_loss, softmax_np
from .nn import Module
from .tensor import Tensor, add, getitem, sigmoid

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    d: int = 64
    variant: Variant = field(default_factory=Variant)
    anchor_sizes: tuple = DEFAULT_SIZES
    anchor_ratios: tuple = DEFAULT_RATIOS
    loss: LossConfig = field(default_factory=LossConfig)
    roi_size: int = 7
    hidden: int = 256
    pre_nms_per_level: int = 256
    post_nms: int = 64
    proposal_nms: float = 0.7
    roi_batch: int = 64
    roi_fg_fraction: float = 0.25
    fg_iou: float = 0.5
    bbox_std: tuple = (0.1, 0.1, 0.2, 0.2)
    score_threshold: float = 0.3
    nms_threshold: float = 0.5
    seed: int = 0

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["variant"] = self.variant.name
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DetectorConfig":
        data = dict(data)
        kw = {}
        if "backbone" in data:
            kw["backbone"] = BackboneConfig(**data.pop("backbone"))
        if "loss" in data:
            kw["loss"] = LossConfig(**data.pop("loss"))
        if "variant" in data:
            v = data.pop("variant")
            kw["variant"] = Variant.parse(v) if isinstance(v, str) else Variant(**v)
        for key in ("anchor_sizes", "anchor_ratios", "bbox_std"):
            if key in data:
                kw[key] = tuple(data.pop(key))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown detector config keys: {sorted(unknown)}")
        return cls(**kw, **data)


def normalize_image(pixels: np.ndarray) -> Tensor:
    """uint8 (or 0..255 float) H x W image -> 1 x H x W normalised tensor."""
    x = np.asarray(pixels, dtype=np.float64) / 255.0
    return Tensor(((x - PIXEL_MEAN) / PIXEL_STD)[None])


@dataclass
class ForwardState:
    pyramid: RefinedPyramid
    logits: Tensor
    deltas: Tensor
    anchors: Anchors
    image_size: tuple[int, int]


class Detector(Module):
    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.backbone = Backbone(cfg.backbone, rng)
        self.fpn = BAFPN(cfg.backbone.widths, cfg.d, cfg.variant, rng)
        self.rpn = RPNHead(cfg.d, len(cfg.anchor_ratios), rng)
        in_dim = cfg.d * cfg.roi_size * cfg.roi_size
        self.box_head = SecondStage(in_dim, cfg.hidden, rng)
        self._anchor_cache: dict = {}

    # -- shared forward ---------------------------------------------------

    def anchors_for(self, pyramid: RefinedPyramid, image_size: tuple[int, int]) -> Anchors:
        shapes = tuple(lv.shape[1:] for lv in pyramid.levels())
        key = (shapes, image_size)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(
                list(shapes), image_size, self.cfg.anchor_sizes, self.cfg.anchor_ratios
            )
        return self._anchor_cache[key]

    def forward(self, image: Tensor) -> ForwardState:
        image_size = tuple(image.shape[1:])
        pyramid = self.fpn(self.backbone(image))
        logits, deltas = self.rpn(pyramid.levels())
        return ForwardState(pyramid, logits, deltas, self.anchors_for(pyramid, image_size), image_size)

    def strides(self, state: ForwardState) -> list[float]:
        return [state.image_size[1] / lv.shape[2] for lv in state.pyramid.levels()]

    def proposals(self, state: ForwardState) -> tuple[np.ndarray, np.ndarray]:
        """Top-scoring decoded anchors per level, merged by NMS; (boxes, objectness)."""
        cfg = self.cfg
        h, w = state.image_size
        logits = state.logits.data
        boxes = clip_boxes(decode(state.deltas.data, state.anchors.boxes, MAX_LOG_RATIO), h, w)
        cand = []
        start = 0
        for count in state.anchors.level_counts:
            idx = np.arange(start, start + count)
            start += count
            top = idx[np.argsort(-logits[idx], kind="stable")[: cfg.pre_nms_per_level]]
            cand.append(top)
        cand = np.concatenate(cand)
        bw = boxes[cand, 2] - boxes[cand, 0]
        bh = boxes[cand, 3] - boxes[cand, 1]
        cand = cand[(bw >= 1.0) & (bh >= 1.0)]
        keep = nms_indices(boxes[cand], logits[cand], cfg.proposal_nms)[: cfg.post_nms]
        sel = cand[keep]
        return boxes[sel], 1.0 / (1.0 + np.exp(-logits[sel]))

    def box_features(self, state: ForwardState, rois: np.ndarray) -> tuple[Tensor, np.ndarray]:
        levels = state.pyramid.levels()[:4]
        return roi_resize(levels, self.strides(state)[:4], rois, self.cfg.roi_size, state.image_size)

    # -- training ---------------------------------------------------------

    def sample_rois(self, proposals: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cfg = self.cfg
        rois = np.concatenate([proposals, gt_boxes]) if len(gt_boxes) else proposals
        labels = np.zeros(len(rois), dtype=np.int64)
        targets = np.zeros((len(rois), 4))
        if len(gt_boxes):
            ious = box_iou(rois, gt_boxes)
            best = ious.argmax(axis=1)
            best_iou = ious[np.arange(len(rois)), best]
            fg = best_iou >= cfg.fg_iou
            labels[fg] = gt_labels[best[fg]] + 1
            targets[fg] = encode(gt_boxes[best[fg]], rois[fg]) / np.asarray(cfg.bbox_std)
        fg_idx = np.flatnonzero(labels > 0)
        bg_idx = np.flatnonzero(labels == 0)
        n_fg = min(len(fg_idx), int(cfg.roi_batch * cfg.roi_fg_fraction))
        n_bg = min(len(bg_idx), cfg.roi_batch - n_fg)
        pick = np.concatenate([
            rng.choice(fg_idx, size=n_fg, replace=False) if n_fg else np.zeros(0, dtype=np.int64),
            rng.choice(bg_idx, size=n_bg, replace=False) if n_bg else np.zeros(0, dtype=np.int64),
        ]).astype(np.int64)
        return rois[pick], labels[pick], targets[pick]

    def loss(self, image: Tensor, gt_boxes: np.ndarray, gt_labels: np.ndarray, rng: np.random.Generator):
        """Joint RPN + box-head loss for one image; returns (loss tensor, info dict)."""
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
        state = self.forward(image)
        assign = assign_targets(state.anchors.boxes, gt_boxes, self.cfg.loss, rng)
        idx = assign.sampled
        p = sigmoid(getitem(state.logits, idx))
        t = getitem(state.deltas, idx)
        l_rpn, rpn_info = rpn_loss(p, t, assign.labels[idx], assign.targets[idx], self.cfg.loss)
        props, _ = self.proposals(state)
        rois, labels, targets = self.sample_rois(props, gt_boxes, gt_labels, rng)
        feats, perm = self.box_features(state, rois)
        logits, deltas = self.box_head(feats)
        l_box, box_info = box_head_loss(logits, deltas, labels[perm], targets[perm])
        total = add(l_rpn, l_box)
        info = {
            "loss": total.item(),
            "rpn_cls": rpn_info.cls,
            "rpn_reg": rpn_info.reg,
            "rpn_pos": rpn_info.num_pos,
            "box_cls": box_info["cls"],
            "box_reg": box_info["reg"],
            "box_fg": box_info["num_fg"],
        }
        return total, info

    # -- inference --------------------------------------------------------

    def detect(self, image: Tensor, score_threshold: float | None = None, image_id: str = "") -> list[Detection]:
        cfg = self.cfg
        thr = cfg.score_threshold if score_threshold is None else score_threshold
        state = self.forward(image)
        props, _ = self.proposals(state)
        if len(props) == 0:
            return []
        feats, perm = self.box_features(state, props)
        props = props[perm]
        logits, deltas = self.box_head(feats)
        scores = softmax_np(logits.data)
        h, w = state.image_size
        K = self.box_head.num_classes
        all_boxes, all_scores, all_labels = [], [], []
        for c in range(K):
            t = deltas.data[:, 4 * c : 4 * c + 4] * np.asarray(cfg.bbox_std)
            boxes = clip_boxes(decode(t, props, MAX_LOG_RATIO), h, w)
            sc = scores[:, c + 1]
            ok = (sc >= thr) & (boxes[:, 2] - boxes[:, 0] > 0) & (boxes[:, 3] - boxes[:, 1] > 0)
            all_boxes.append(boxes[ok])
            all_scores.append(sc[ok])
            all_labels.append(np.full(int(ok.sum()), c))
        boxes = np.concatenate(all_boxes)
        sc = np.concatenate(all_scores)
        labels = np.concatenate(all_labels)
        keep = batched_nms(boxes, sc, labels, cfg.nms_threshold)
        return [
            Detection(BBox.from_corners(*boxes[i]), int(labels[i]), float(sc[i]), image_id) for i in keep
        ]
