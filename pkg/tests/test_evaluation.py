import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tomformer.evaluation import (
    Detection,
    GroundTruth,
    average_precision,
    detections_from_output,
    match_detections,
    mean_ap,
    precision_recall,
)
from tomformer.matching import BoundingBox, iou
from tomformer.model import DetectionOutput
from tomformer.tensor import Tensor


def box_at(x0, y0, x1, y1):
    return BoundingBox.from_corners(x0, y0, x1, y1)


def brute_force_ap(flags, num_gt):
    """Sum of recall increments, each weighted by the best precision reachable at or beyond it."""
    if num_gt == 0:
        return 0.0
    n = len(flags)
    tp = np.cumsum(np.asarray(flags, dtype=float))
    recall = tp / num_gt
    precision = tp / np.arange(1, n + 1)
    total, prev = 0.0, 0.0
    for k in range(n):
        total += (recall[k] - prev) * max(precision[k:])
        prev = recall[k]
    return total


class TestAveragePrecision:
    def test_hand_fixture_exact(self):
        assert average_precision([True, False, True], 2) == 5 / 6

    def test_perfect(self):
        assert average_precision([True] * 4, 4) == 1.0

    def test_no_detections(self):
        assert average_precision([], 3) == 0.0

    def test_no_ground_truth(self):
        assert average_precision([False, False], 0) == 0.0

    def test_partial_recall(self):
        assert average_precision([True], 4) == 0.25

    def test_envelope_lifts_early_precision(self):
        # [FP, TP]: precision 1/2 at recall 1
        assert average_precision([False, True], 1) == 0.5

    def test_precision_recall_points(self):
        assert precision_recall([True, False, True], 2) == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.booleans(), max_size=20), st.integers(0, 25))
    def test_matches_brute_force(self, flags, extra):
        num_gt = sum(flags) + extra
        assert abs(average_precision(flags, num_gt) - brute_force_ap(flags, num_gt)) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.booleans(), max_size=20), st.integers(1, 5))
    def test_bounded(self, flags, extra):
        ap = average_precision(flags, sum(flags) + extra)
        assert 0.0 <= ap <= 1.0


class TestMatchDetections:
    gt = GroundTruth("i", 0, box_at(0.1, 0.1, 0.5, 0.5))

    def test_exact_hit(self):
        assert match_detections([Detection("i", 0, 0.9, self.gt.box)], [self.gt]) == [True]

    def test_duplicate_is_false_positive(self):
        dets = [Detection("i", 0, 0.4, self.gt.box), Detection("i", 0, 0.9, self.gt.box)]
        assert match_detections(dets, [self.gt]) == [False, True]

    def test_score_ties_keep_input_order(self):
        dets = [Detection("i", 0, 0.5, self.gt.box), Detection("i", 0, 0.5, self.gt.box)]
        assert match_detections(dets, [self.gt]) == [True, False]

    def test_class_and_image_must_agree(self):
        dets = [Detection("i", 1, 0.9, self.gt.box), Detection("j", 0, 0.9, self.gt.box)]
        assert match_detections(dets, [self.gt]) == [False, False]

    def test_threshold_is_inclusive(self):
        half = Detection("i", 0, 0.9, box_at(0.0, 0.0, 2.0, 1.0))
        gt = GroundTruth("i", 0, box_at(0.0, 0.0, 1.0, 1.0))
        assert match_detections([half], [gt], 0.5) == [True]
        assert match_detections([half], [gt], 0.5000001) == [False]

    def test_three_detections_two_truths(self):
        # A and B are unit squares side by side. Walking the greedy rule by score:
        #   d1 (0.9) = [0, 1.5] x [0, 1]: IoU(A) = 1/1.5, IoU(B) = 0.5/2, claims A -> TP
        #   d2 (0.8) = A exactly, but A is taken and IoU(B) = 0 -> FP
        #   d3 (0.7) = B shifted right by 0.2: IoU(B) = 0.8/1.2 -> TP
        A = GroundTruth("i", 2, box_at(0.0, 0.0, 1.0, 1.0))
        B = GroundTruth("i", 2, box_at(1.0, 0.0, 2.0, 1.0))
        d1 = Detection("i", 2, 0.9, box_at(0.0, 0.0, 1.5, 1.0))
        d2 = Detection("i", 2, 0.8, box_at(0.0, 0.0, 1.0, 1.0))
        d3 = Detection("i", 2, 0.7, box_at(1.2, 0.0, 2.2, 1.0))
        assert match_detections([d3, d1, d2], [A, B]) == [True, True, False]
        assert average_precision([True, False, True], 2) == pytest.approx(5 / 6, abs=0)

    def test_prefers_highest_iou_truth(self):
        A = GroundTruth("i", 0, box_at(0.0, 0.0, 1.0, 1.0))
        B = GroundTruth("i", 0, box_at(0.1, 0.0, 1.1, 1.0))
        d = Detection("i", 0, 0.9, box_at(0.1, 0.0, 1.1, 1.0))
        other = Detection("i", 0, 0.8, box_at(0.0, 0.0, 1.0, 1.0))
        assert match_detections([d, other], [A, B]) == [True, True]

    def test_score_validated(self):
        with pytest.raises(ValueError):
            Detection("i", 0, 1.5, self.gt.box)


def fixture_8_classes():
    """One image per class, with hand-chosen hit/miss patterns."""
    gts, dets, expected = [], [], {}
    patterns = {
        0: ([True], 1, 1.0),
        1: ([True, False, True], 2, 5 / 6),
        2: ([False, True], 1, 0.5),
        3: ([True], 2, 0.5),
        4: ([], 1, 0.0),
        5: ([True, True, False], 3, 2 / 3),
        6: ([False, False, True], 1, 1 / 3),
        7: ([True, False, False, True], 2, 0.75),
    }
    for c, (flags, n_gt, ap) in patterns.items():
        image = f"img{c}"
        for g in range(n_gt):
            gts.append(GroundTruth(image, c, box_at(0.1 * g, 0.0, 0.1 * g + 0.05, 0.05)))
        hit = 0
        for k, flag in enumerate(flags):
            score = 0.95 - 0.1 * k
            if flag:
                dets.append(Detection(image, c, score, gts[-n_gt + hit].box))
                hit += 1
            else:
                dets.append(Detection(image, c, score, box_at(0.8, 0.8, 0.9, 0.9)))
        expected[c] = ap
    return dets, gts, expected


class TestMeanAP:
    def test_single_perfect_class(self):
        gt = GroundTruth("i", 4, box_at(0.2, 0.2, 0.4, 0.4))
        report = mean_ap([Detection("i", 4, 1.0, gt.box)], [gt])
        assert report.map == 1.0
        assert list(report.per_class_ap) == [4]

    def test_two_class_mean(self):
        dets, gts, _ = fixture_8_classes()
        keep = {1, 7}
        report = mean_ap([d for d in dets if d.class_id in keep], [g for g in gts if g.class_id in keep])
        assert report.map == pytest.approx((5 / 6 + 0.75) / 2, abs=1e-15)

    def test_eight_class_fixture(self):
        dets, gts, expected = fixture_8_classes()
        report = mean_ap(dets, gts)
        for c, ap in expected.items():
            assert report.per_class_ap[c] == pytest.approx(ap, abs=1e-15)
        assert report.map == pytest.approx(sum(expected.values()) / 8, abs=1e-15)

    def test_classes_without_truth_excluded(self):
        gt = GroundTruth("i", 0, box_at(0.2, 0.2, 0.4, 0.4))
        dets = [Detection("i", 0, 0.9, gt.box), Detection("i", 5, 0.9, gt.box)]
        report = mean_ap(dets, [gt])
        assert report.map == 1.0 and 5 not in report.per_class_ap

    def test_empty_split(self):
        report = mean_ap([], [])
        assert report.map == 0.0 and report.empty
        assert "warning" in report.to_text()

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 7), st.floats(0.0, 0.6), st.floats(0.0, 0.6)), min_size=1, max_size=12),
           st.floats(0.01, 1.0))
    def test_identity_is_one(self, objs, thr):
        gts = [GroundTruth(f"img{i % 3}", c, box_at(x, y, x + 0.3, y + 0.3)) for i, (c, x, y) in enumerate(objs)]
        dets = [Detection(g.image_id, g.class_id, 1.0, g.box) for g in gts]
        assert mean_ap(dets, gts, thr).map == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 1.0))
    def test_positive_rescaling_invariant(self, seed, scale):
        rng = np.random.default_rng(seed)
        dets, gts = random_fixture(rng)
        scaled = [Detection(d.image_id, d.class_id, d.score * scale, d.box) for d in dets]
        base, rescaled = mean_ap(dets, gts), mean_ap(scaled, gts)
        assert base.per_class_ap == rescaled.per_class_ap

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_duplicate_never_helps(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = random_fixture(rng)
        flags = match_detections(dets, gts)
        matched = [d for d, f in zip(dets, flags) if f]
        if not matched:
            return
        d = matched[rng.integers(len(matched))]
        # a duplicate ranks below its original and overlaps no other truth, so it can only be a false positive
        others = [g for g in gts if (g.image_id, g.class_id) == (d.image_id, d.class_id)]
        if sum(iou(d.box, g.box) >= 0.5 for g in others) > 1:
            return
        dup = Detection(d.image_id, d.class_id, float(rng.uniform(0, d.score)), d.box)
        before = mean_ap(dets, gts).per_class_ap[d.class_id]
        after = mean_ap(dets + [dup], gts).per_class_ap[d.class_id]
        assert after <= before


def random_fixture(rng, n_images=3, max_gt=4, max_dets=20):
    gts, dets = [], []
    for i in range(n_images):
        for _ in range(rng.integers(0, max_gt + 1)):
            x, y = rng.uniform(0, 0.7, 2)
            gts.append(GroundTruth(f"img{i}", int(rng.integers(0, 3)), box_at(x, y, x + 0.3, y + 0.3)))
    for _ in range(rng.integers(0, max_dets + 1)):
        if gts and rng.uniform() < 0.6:
            g = gts[rng.integers(len(gts))]
            jitter = rng.normal(0, 0.05, 2)
            x0, y0 = g.box.corners()[:2] + jitter
            dets.append(Detection(g.image_id, g.class_id, float(rng.uniform()), box_at(x0, y0, x0 + 0.3, y0 + 0.3)))
        else:
            x, y = rng.uniform(0, 0.7, 2)
            dets.append(Detection(f"img{rng.integers(n_images)}", int(rng.integers(0, 3)), float(rng.uniform()),
                                  box_at(x, y, x + 0.3, y + 0.3)))
    return dets, gts


class TestReport:
    def test_layout(self):
        dets, gts, expected = fixture_8_classes()
        text = mean_ap(dets, gts).to_text()
        lines = text.splitlines()
        assert lines[0] == "mAP@0.5"
        assert lines[3].startswith("Healthy") and lines[3].endswith("100.00%")
        assert lines[4].startswith("Bacterial spots") and lines[4].endswith("83.33%")
        assert lines[-1].startswith("Average")
        assert len(lines) == 3 + 8 + 2

    def test_json_contents(self):
        dets, gts, _ = fixture_8_classes()
        report = mean_ap(dets, gts, iou_threshold=0.6)
        d = json.loads(report.to_json())
        assert d["iou_threshold"] == 0.6 and d["map"] == report.map
        assert [c["name"] for c in d["classes"]][3] == "late blight"

    def test_missing_class_marked(self):
        gt = GroundTruth("i", 0, box_at(0.2, 0.2, 0.4, 0.4))
        text = mean_ap([], [gt]).to_text()
        assert "n/a" in text.splitlines()[4]

    def test_csv(self):
        dets, gts, _ = fixture_8_classes()
        rows = mean_ap(dets, gts).to_csv().splitlines()
        assert rows[0] == "class_id,class,rank,recall,precision"
        assert rows[1] == "0,healthy,1,1.0,1.0"
        assert len(rows) == 1 + sum(1 for d in dets)


class TestDetectionsFromOutput:
    def _output(self, logits, boxes):
        return DetectionOutput(Tensor(np.array(logits, dtype=float)), Tensor(np.array(boxes, dtype=float)))

    def test_no_object_dropped(self):
        out = self._output([[0.0, 0.0, 5.0], [3.0, 0.0, 0.0]], [[0.5, 0.5, 0.2, 0.2]] * 2)
        dets = detections_from_output(out, "x")
        assert len(dets) == 1
        assert dets[0].class_id == 0
        assert dets[0].score == pytest.approx(math.exp(3) / (math.exp(3) + 2), abs=1e-15)

    def test_score_is_softmax_over_all(self):
        out = self._output([[1.0, 2.0, 0.0]], [[0.5, 0.5, 0.2, 0.2]])
        (d,) = detections_from_output(out, "x")
        z = math.exp(1) + math.exp(2) + 1
        assert d.class_id == 1 and d.score == pytest.approx(math.exp(2) / z, abs=1e-15)
        assert d.box == BoundingBox(0.5, 0.5, 0.2, 0.2)
