import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from eldetect.boxes import CLASSES, BBox, Detection
from eldetect.metrics import (
    DEFECT_FREE,
    ClassificationCounts,
    confusion,
    envelope_ap,
    evaluate_detections,
    f_measure,
    image_level_counts,
    miss_rate,
    precision_recall_f,
)
from eldetect.tensor import ContractError
from eldetect.voc import Annotation

# (P, R, F) triples reported to two decimals by detectors of this family
REFERENCE_TRIPLES = [
    (86.73, 97.30, 91.71),
    (93.53, 96.04, 94.77),
    (99.17, 97.78, 98.47),
    (99.21, 98.20, 98.70),
    (94.62, 96.72, 95.66),
    (95.87, 97.42, 96.64),
    (96.18, 97.86, 97.01),
    (95.13, 97.07, 96.09),
    (98.58, 97.91, 98.24),
]


def ann(cls, x1, y1, x2, y2):
    return Annotation(CLASSES[cls], float(x1), float(y1), float(x2), float(y2))


def det(cls, score, x1, y1, x2, y2):
    return Detection(BBox.from_corners(x1, y1, x2, y2), cls, score)


class TestClassificationMetrics:
    @pytest.mark.parametrize("p,r,f", REFERENCE_TRIPLES)
    def test_reference_triples(self, p, r, f):
        assert abs(f_measure(p, r) - f) <= 0.01

    def test_counts_to_percentages(self):
        prf = precision_recall_f(ClassificationCounts(tp=90, fp=10, fn=30))
        assert (prf.precision, prf.recall) == (90.0, 75.0)
        assert prf.f_measure == pytest.approx(2 * 90 * 75 / 165) and not prf.degenerate

    @pytest.mark.parametrize("counts", [(0, 0, 5), (0, 5, 0), (0, 0, 0)])
    def test_degenerate_flag(self, counts):
        prf = precision_recall_f(ClassificationCounts(*counts))
        assert prf.degenerate and prf.f_measure == 0.0

    def test_negative_counts(self):
        with pytest.raises(ValueError):
            ClassificationCounts(1, -1, 0)

    @given(st.floats(0.01, 100.0))
    def test_equal_p_r(self, r):
        assert f_measure(r, r) == pytest.approx(r)

    @settings(max_examples=200)
    @given(st.integers(0, 1000), st.integers(0, 1000), st.integers(0, 1000))
    def test_f_between_min_and_max(self, tp, fp, fn):
        prf = precision_recall_f(ClassificationCounts(tp, fp, fn))
        if tp:
            assert min(prf.precision, prf.recall) - 1e-9 <= prf.f_measure <= max(prf.precision, prf.recall) + 1e-9

    @pytest.mark.parametrize("misses,total,pct", [(11, 685, 1.61), (13, 1249, 1.04), (0, 40, 0.0)])
    def test_miss_rates(self, misses, total, pct):
        assert round(100 * miss_rate(misses, total), 2) == pct


class TestEvaluateDetections:
    def test_exact_hit(self):
        r = evaluate_detections({"a": [det(0, 0.9, 0, 0, 10, 10)]}, {"a": [ann(0, 0, 0, 10, 10)]})
        assert r.ap == {"crack": 1.0} and r.mAP == 1.0 and r.miou == 1.0

    def test_no_detections(self):
        gts = {"a": [ann(0, 0, 0, 10, 10), ann(2, 20, 20, 40, 40)]}
        r = evaluate_detections({}, gts)
        assert r.ap == {"crack": 0.0, "black_core": 0.0} and r.mAP == 0.0 and r.miou == 0.0

    def test_half_recall_hand_value(self):
        gts = {"a": [ann(1, 0, 0, 10, 10), ann(1, 50, 50, 60, 60)]}
        dets = {"a": [det(1, 0.9, 50, 50, 60, 60), det(1, 0.8, 100, 100, 110, 110)]}
        r = evaluate_detections(dets, gts)
        assert r.ap["finger_interruption"] == pytest.approx(0.5)
        np.testing.assert_allclose(r.curves["finger_interruption"].precision, [1.0, 0.5])

    def test_iou_threshold_boundary(self):
        gts = {"a": [ann(0, 0, 0, 10, 10)]}
        # IoU exactly 0.5: [0,0,10,10] vs [0,0,10,20] -> 100 / 200
        assert evaluate_detections({"a": [det(0, 0.5, 0, 0, 10, 20)]}, gts).ap["crack"] == 1.0
        assert evaluate_detections({"a": [det(0, 0.5, 0, 0, 10, 21)]}, gts).ap["crack"] == 0.0

    def test_wrong_class_is_false_positive(self):
        r = evaluate_detections({"a": [det(2, 0.9, 0, 0, 10, 10)]}, {"a": [ann(0, 0, 0, 10, 10)]})
        assert r.ap == {"crack": 0.0}

    def test_unknown_image(self):
        with pytest.raises(ContractError):
            evaluate_detections({"b": [det(0, 0.9, 0, 0, 1, 1)]}, {"a": []})

    def test_unknown_class(self):
        with pytest.raises(ContractError):
            evaluate_detections({}, {"a": [Annotation("scratch", 0, 0, 1, 1)]})

    def test_envelope(self):
        assert envelope_ap(np.array([0.5, 0.5, 1.0]), np.array([1.0, 0.5, 0.6])) == pytest.approx(0.8)

    def test_duplicate_true_positive_does_not_raise_ap(self):
        gts = {"a": [ann(0, 0, 0, 10, 10), ann(0, 30, 30, 40, 40)]}
        base = [det(0, 0.9, 0, 0, 10, 10), det(0, 0.5, 30, 30, 40, 40)]
        before = evaluate_detections({"a": base}, gts).ap["crack"]
        after = evaluate_detections({"a": base + [det(0, 0.7, 0, 0, 10, 10)]}, gts).ap["crack"]
        assert after <= before

    def test_miou_flavours(self):
        gts = {"a": [ann(0, 0, 0, 10, 10), ann(0, 20, 0, 30, 10), ann(1, 0, 20, 10, 30)]}
        dets = {"a": [det(0, 0.9, 0, 0, 10, 10), det(0, 0.8, 20, 0, 30, 10), det(1, 0.9, 0, 20, 10, 35)]}
        r = evaluate_detections(dets, gts)
        finger = 100 / 150
        assert r.miou == pytest.approx((2 + finger) / 3)
        assert r.miou_by_class == pytest.approx((1 + finger) / 2)


def random_instance(seed):
    rng = np.random.default_rng(seed)
    images = [f"im{k}" for k in range(5)]
    gts = {img: [] for img in images}
    gt_list, det_list = [], []
    for _ in range(int(rng.integers(3, 10))):
        img, c = images[rng.integers(5)], int(rng.integers(3))
        x, y = rng.uniform(0, 40, 2)
        w, h = rng.uniform(5, 20, 2)
        gts[img].append(ann(c, x, y, x + w, y + h))
        gt_list.append((img, c, (x, y, x + w, y + h)))
    dets = {img: [] for img in images}
    # coarse scores so ties occur
    for _ in range(30):
        if gt_list and rng.random() < 0.6:
            img, c, (x1, y1, x2, y2) = gt_list[rng.integers(len(gt_list))]
            j = rng.normal(scale=3, size=4)
            box = (x1 + j[0], y1 + j[1], max(x2 + j[2], x1 + j[0] + 1), max(y2 + j[3], y1 + j[1] + 1))
            if rng.random() < 0.2:
                c = int(rng.integers(3))
        else:
            img, c = images[rng.integers(5)], int(rng.integers(3))
            x, y = rng.uniform(0, 40, 2)
            box = (x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20))
        s = float(rng.integers(1, 11)) / 10
        dets[img].append(det(c, s, *box))
        det_list.append((img, c, s, box))
    # evaluator visits ties in dict/list order; mirror that ordering for the oracle
    ordered = [(img, d.class_id, d.score, d.box.corners()) for img in images for d in dets[img]]
    return dets, gts, ordered, gt_list


class TestOracleAgreement:
    @pytest.mark.parametrize("seed", range(100))
    def test_exhaustive_threshold_oracle(self, seed):
        dets, gts, det_list, gt_list = random_instance(seed)
        r = evaluate_detections(dets, gts)
        expected = {}
        for c, name in enumerate(CLASSES):
            ap = oracles.average_precision_exhaustive(det_list, gt_list, c)
            if ap is not None:
                expected[name] = ap
        assert set(r.ap) == set(expected)
        for name in expected:
            assert abs(r.ap[name] - expected[name]) <= 1e-9
        assert abs(r.mAP - np.mean(list(expected.values()))) <= 1e-12
        assert all(0.0 <= v <= 1.0 for v in r.ap.values())

    @pytest.mark.parametrize("seed", range(20))
    def test_curve_recall_monotone(self, seed):
        dets, gts, _, _ = random_instance(seed)
        for curve in evaluate_detections(dets, gts).curves.values():
            assert np.all(np.diff(curve.recall) >= 0)
            assert np.all(np.diff(curve.thresholds) < 0)


class TestConfusion:
    def test_perfect_is_diagonal(self):
        gts = {"a": [ann(0, 0, 0, 5, 5)], "b": [ann(1, 0, 0, 5, 5), ann(1, 9, 9, 15, 15)], "c": [ann(2, 0, 0, 5, 5)], "d": []}
        dets = {"a": [det(0, 0.9, 0, 0, 5, 5)], "b": [det(1, 0.8, 0, 0, 5, 5)], "c": [det(2, 0.99, 0, 0, 5, 5)]}
        res = confusion(dets, gts)
        np.testing.assert_array_equal(res.matrix, np.diag([1, 2, 1, 1]))
        assert all(v == 0.0 for v in res.miss_rate.values())

    def test_below_threshold_is_miss(self):
        gts = {"a": [ann(0, 0, 0, 5, 5)]}
        res = confusion({"a": [det(0, 0.29, 0, 0, 5, 5)]}, gts, score_thr=0.3)
        assert res.matrix[0, 3] == 1 and res.miss_rate["crack"] == 1.0

    def test_other_class_column(self):
        gts = {"a": [ann(0, 0, 0, 5, 5)]}
        res = confusion({"a": [det(1, 0.4, 0, 0, 5, 5), det(2, 0.6, 9, 9, 20, 20)]}, gts)
        assert res.matrix[0, 2] == 1

    def test_false_alarm_on_clean_image(self):
        res = confusion({"z": [det(2, 0.9, 0, 0, 5, 5)]}, {"z": []})
        assert res.matrix[3, 2] == 1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_row_sums_equal_class_totals(self, seed):
        dets, gts, _, gt_list = random_instance(seed)
        res = confusion(dets, gts)
        for c in range(3):
            assert res.matrix[c].sum() == sum(1 for _, k, _ in gt_list if k == c)
        assert res.matrix[3].sum() == sum(1 for v in gts.values() if not v)

    def test_to_dict_labels(self):
        d = confusion({}, {"a": []}).to_dict()
        assert d["labels"][-1] == DEFECT_FREE and d["matrix"][3][3] == 1


class TestImageLevel:
    def test_counts(self):
        gts = {"a": [ann(0, 0, 0, 5, 5)], "b": [ann(1, 0, 0, 5, 5)], "c": [], "d": []}
        dets = {"a": [det(0, 0.9, 0, 0, 5, 5)], "c": [det(2, 0.5, 0, 0, 5, 5)], "d": [det(2, 0.1, 0, 0, 5, 5)]}
        c = image_level_counts(dets, gts)
        assert (c.tp, c.fp, c.fn) == (1, 1, 1)
