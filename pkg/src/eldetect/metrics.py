"""Classification and detection metrics: P/R/F, AP/mAP/MIoU, confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import CLASSES, Detection, box_iou
from .tensor import ContractError
from .voc import Annotation

DEFECT_FREE = "defect_free"
CONFUSION_LABELS = CLASSES + (DEFECT_FREE,)


@dataclass
class ClassificationCounts:
    tp: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("counts must be non-negative")


@dataclass
class PRF:
    precision: float
    recall: float
    f_measure: float
    degenerate: bool = False


def f_measure(precision: float, recall: float) -> float:
    """Harmonic mean 2PR/(P+R); 0 when P + R = 0."""
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def precision_recall_f(c: ClassificationCounts) -> PRF:
    """Percentages; a zero denominator yields 0 with ``degenerate`` set."""
    degenerate = False
    if c.tp + c.fp > 0:
        p = 100.0 * c.tp / (c.tp + c.fp)
    else:
        p, degenerate = 0.0, True
    if c.tp + c.fn > 0:
        r = 100.0 * c.tp / (c.tp + c.fn)
    else:
        r, degenerate = 0.0, True
    return PRF(p, r, f_measure(p, r), degenerate)


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray
    ap: float


@dataclass
class EvalResult:
    ap: dict[str, float]
    mAP: float
    miou: float
    curves: dict[str, PRCurve]
    num_gt: dict[str, int]
    matched_ious: list[float] = field(default_factory=list, repr=False)
    miou_by_class: float = 0.0

    def to_dict(self) -> dict:
        return {"ap": self.ap, "mAP": self.mAP, "MIoU": self.miou, "MIoU_class_mean": self.miou_by_class,
                "num_gt": self.num_gt}


def envelope_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Exact area under the monotone precision envelope (all-points interpolation)."""
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([precision, [0.0]])
    env = np.maximum.accumulate(p[::-1])[::-1][:-1]
    return float(np.sum((r[1:] - r[:-1]) * env))


def _gt_by_class(gts: dict[str, list[Annotation]]):
    out = {c: {} for c in CLASSES}
    for img, anns in gts.items():
        for a in anns:
            if a.name not in CLASSES:
                raise ContractError(f"unknown class {a.name!r}")
            out[a.name].setdefault(img, []).append(a.corners())
    return {c: {img: np.asarray(b, dtype=np.float64) for img, b in d.items()} for c, d in out.items()}


def evaluate_detections(
    dets: dict[str, list[Detection]],
    gts: dict[str, list[Annotation]],
    iou_thr: float = 0.5,
) -> EvalResult:
    """Per-class AP from the score-swept P-R curve, their mean, and MIoU.

    Detections of a class are visited in descending score order (ties keep
    input order) and matched to the unmatched same-image, same-class ground
    truth box of highest IoU, provided IoU >= ``iou_thr``.  Curve points are
    taken at each distinct score.  Classes without ground truth are left out
    of ``ap`` and of the mean.  MIoU averages the IoU of all true-positive
    matches.
    """
    unknown = set(dets) - set(gts)
    if unknown:
        raise ContractError(f"detections for images without annotations: {sorted(unknown)[:5]}")
    by_class = _gt_by_class(gts)
    aps, curves, num_gt = {}, {}, {}
    matched_ious: list[float] = []
    class_mious = []
    for ci, cname in enumerate(CLASSES):
        gt_c = by_class[cname]
        n_gt = sum(len(b) for b in gt_c.values())
        num_gt[cname] = n_gt
        entries = [(d.score, img, d.box.corners()) for img, ds in dets.items() for d in ds if d.class_id == ci]
        order = sorted(range(len(entries)), key=lambda i: -entries[i][0])
        used = {img: np.zeros(len(b), dtype=bool) for img, b in gt_c.items()}
        tp = np.zeros(len(order))
        scores = np.array([entries[i][0] for i in order])
        c_ious = []
        for k, i in enumerate(order):
            _, img, box = entries[i]
            if img not in gt_c:
                continue
            ious = box_iou(box[None], gt_c[img])[0]
            ious[used[img]] = -1.0
            j = int(ious.argmax())
            if ious[j] >= iou_thr:
                used[img][j] = True
                tp[k] = 1
                c_ious.append(float(ious[j]))
        matched_ious.extend(c_ious)
        if c_ious:
            class_mious.append(float(np.mean(c_ious)))
        if n_gt == 0:
            continue
        if len(order) == 0:
            aps[cname] = 0.0
            curves[cname] = PRCurve(np.zeros(0), np.zeros(0), np.zeros(0), 0.0)
            continue
        ctp = np.cumsum(tp)
        # one curve point per distinct score: the last index of each tie group
        last = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
        recall = ctp[last] / n_gt
        precision = ctp[last] / (last + 1)
        ap = envelope_ap(recall, precision)
        aps[cname] = ap
        curves[cname] = PRCurve(recall, precision, scores[last], ap)
    m_ap = float(np.mean(list(aps.values()))) if aps else 0.0
    miou = float(np.mean(matched_ious)) if matched_ious else 0.0
    miou_c = float(np.mean(class_mious)) if class_mious else 0.0
    return EvalResult(aps, m_ap, miou, curves, num_gt, matched_ious, miou_c)


@dataclass
class ConfusionResult:
    matrix: np.ndarray  # rows: true, cols: predicted, order CONFUSION_LABELS
    miss_rate: dict[str, float]

    def to_dict(self) -> dict:
        return {"labels": list(CONFUSION_LABELS), "matrix": self.matrix.tolist(), "miss_rate": self.miss_rate}


def image_prediction(dets: list[Detection], score_thr: float) -> list[int]:
    """Classes predicted for an image, by descending best score."""
    best: dict[int, float] = {}
    for d in dets:
        if d.score >= score_thr:
            best[d.class_id] = max(best.get(d.class_id, 0.0), d.score)
    return sorted(best, key=lambda c: -best[c])


def confusion(dets: dict[str, list[Detection]], gts: dict[str, list[Annotation]], score_thr: float = 0.3) -> ConfusionResult:
    """Defect-level confusion matrix with image-level predictions.

    Each ground-truth defect of class k counts in row k: column k when the
    image has a detection of class k scoring >= ``score_thr``, otherwise the
    best-scoring other predicted class, otherwise defect-free.  Each image
    without ground truth counts once in the defect-free row, in the column of
    its best-scoring predicted class (or defect-free).
    """
    K = len(CLASSES)
    mat = np.zeros((K + 1, K + 1), dtype=np.int64)
    for img, anns in gts.items():
        pred = image_prediction(dets.get(img, []), score_thr)
        if not anns:
            mat[K, pred[0] if pred else K] += 1
            continue
        for a in anns:
            k = a.class_id
            col = k if k in pred else (pred[0] if pred else K)
            mat[k, col] += 1
    miss = {}
    for k, cname in enumerate(CLASSES):
        total = mat[k].sum()
        miss[cname] = float(mat[k, K] / total) if total else 0.0
    return ConfusionResult(mat, miss)


def miss_rate(misses: int, total: int) -> float:
    return misses / total if total else 0.0


def image_level_counts(dets: dict[str, list[Detection]], gts: dict[str, list[Annotation]],
                       score_thr: float = 0.3) -> ClassificationCounts:
    """Defective-vs-defect-free image counts: TP/FN over defective images, FP over clean ones."""
    tp = fp = fn = 0
    for img, anns in gts.items():
        flagged = bool(image_prediction(dets.get(img, []), score_thr))
        if anns:
            tp += flagged
            fn += not flagged
        else:
            fp += flagged
    return ClassificationCounts(tp, fp, fn)
