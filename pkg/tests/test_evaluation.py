import numpy as np
import pytest

from slimdet.errors import ShapeError
from slimdet.evaluation import average_precision, evaluate_map, iou, pixel_area, size_bucket
from slimdet.priors import Annotation, Detection


def scalar_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def brute_force_ap(detections, truths, threshold, counted=None):
    """Greedy score-order matching, then the area under the monotone precision envelope."""
    counted = [True] * len(truths) if counted is None else list(counted)
    total = sum(counted)
    if total == 0:
        return None
    order = sorted(range(len(detections)), key=lambda k: (-detections[k][1], detections[k][0], k))
    taken = set()
    flags = []
    for k in order:
        image_id, _, box = detections[k]
        best, best_iou = None, threshold
        for t, (truth_image, truth_box) in enumerate(truths):
            if truth_image != image_id or t in taken:
                continue
            overlap = scalar_iou(box, truth_box)
            if overlap >= best_iou and (best is None or overlap > best_iou):
                best, best_iou = t, overlap
        if best is not None:
            taken.add(best)
            if not counted[best]:
                continue
        flags.append(best is not None)

    points = []
    hits = 0
    for rank, hit in enumerate(flags, start=1):
        hits += hit
        points.append((hits / total, hits / rank))
    area, previous_recall = 0.0, 0.0
    for i, (recall, _) in enumerate(points):
        if recall > previous_recall:
            envelope = max(p for _, p in points[i:])
            area += (recall - previous_recall) * envelope
            previous_recall = recall
    return area


def mean_defined(values):
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None


def assert_same_ap(actual, expected):
    if expected is None:
        assert actual is None
    else:
        assert actual == pytest.approx(expected, abs=1e-12)


def random_boxes(rng, count):
    lo = rng.uniform(0.0, 0.7, size=(count, 2))
    return [tuple(b) for b in np.column_stack([lo, lo + rng.uniform(0.05, 0.3, size=(count, 2))])]


def random_problem(rng):
    """Jittered hits on most truths plus unrelated boxes, spread over a few images."""
    n_images = int(rng.integers(1, 4))
    truths = [(int(rng.integers(0, n_images)), box) for box in random_boxes(rng, int(rng.integers(1, 8)))]
    detections = []
    for image_id, box in truths:
        if rng.uniform() < 0.7:
            jitter = rng.normal(scale=0.03, size=4)
            x0, y0 = box[0] + jitter[0], box[1] + jitter[1]
            detections.append((image_id, float(rng.uniform()),
                               (x0, y0, max(box[2] + jitter[2], x0 + 0.01), max(box[3] + jitter[3], y0 + 0.01))))
    for box in random_boxes(rng, int(rng.integers(0, 6))):
        detections.append((int(rng.integers(0, n_images)), float(rng.uniform()), box))
    return detections, truths, n_images


class TestIou:

    def test_partial_overlap(self):
        assert iou((0.0, 0.0, 2.0, 2.0), (1.0, 1.0, 3.0, 3.0)) == pytest.approx(1.0 / 7.0)

    def test_identical_and_disjoint(self):
        box = (0.1, 0.2, 0.4, 0.6)
        assert iou(box, box) == pytest.approx(1.0)
        assert iou(box, (0.5, 0.7, 0.9, 0.9)) == 0.0

    def test_degenerate_box_rejected(self):
        with pytest.raises(ShapeError):
            iou((0.1, 0.1, 0.1, 0.5), (0.0, 0.0, 1.0, 1.0))


class TestAveragePrecision:

    def test_single_hit(self):
        box = (0.1, 0.1, 0.3, 0.3)
        assert average_precision([(0, 0.9, box)], [(0, box)]) == pytest.approx(1.0)

    def test_false_positive_ranked_first(self):
        box = (0.1, 0.1, 0.3, 0.3)
        detections = [(0, 0.9, (0.6, 0.6, 0.8, 0.8)), (0, 0.5, box)]
        assert average_precision(detections, [(0, box)]) == pytest.approx(0.5)

    def test_duplicate_detection_is_false_positive(self):
        box = (0.1, 0.1, 0.3, 0.3)
        detections = [(0, 0.9, box), (0, 0.8, box)]
        assert average_precision(detections, [(0, box)]) == pytest.approx(1.0)
        assert average_precision(detections, [(0, box), (0, (0.5, 0.5, 0.9, 0.9))]) == pytest.approx(0.5)

    def test_other_image_does_not_match(self):
        box = (0.1, 0.1, 0.3, 0.3)
        assert average_precision([(1, 0.9, box)], [(0, box)]) == 0.0

    def test_no_truths_is_undefined(self):
        assert average_precision([(0, 0.9, (0.1, 0.1, 0.3, 0.3))], []) is None

    def test_no_detections_is_zero(self):
        assert average_precision([], [(0, (0.1, 0.1, 0.3, 0.3))]) == 0.0

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            detections, truths, _ = random_problem(rng)
            expected = brute_force_ap(detections, truths, 0.5)
            assert average_precision(detections, truths, 0.5) == pytest.approx(expected, abs=1e-12)

    def test_lowest_scored_false_positive_keeps_ap(self, rng):
        for _ in range(50):
            detections, truths, n_images = random_problem(rng)
            extra = (n_images, -1.0, (0.1, 0.1, 0.3, 0.3))
            base = average_precision(detections, truths)
            assert average_precision(detections + [extra], truths) == pytest.approx(base, abs=1e-12)

    def test_false_positive_above_a_hit_lowers_ap(self, rng):
        for _ in range(50):
            detections, truths, n_images = random_problem(rng)
            detections.append((truths[0][0], 0.5, truths[0][1]))
            extra = (n_images, 2.0, (0.1, 0.1, 0.3, 0.3))
            base = average_precision(detections, truths)
            assert base > 0.0
            assert average_precision(detections + [extra], truths) < base

    def test_lowest_scored_hit_on_missed_truth_raises_ap(self, rng):
        for _ in range(50):
            detections, truths, n_images = random_problem(rng)
            missed = (n_images, (0.2, 0.2, 0.6, 0.6))
            truths.append(missed)
            base = average_precision(detections, truths)
            assert average_precision(detections + [(n_images, -1.0, missed[1])], truths) > base

    def test_invariant_under_monotone_rescoring(self, rng):
        truths = [(0, box) for box in random_boxes(rng, 6)]
        detections = [(0, float(rng.uniform()), box) for box in random_boxes(rng, 10)]
        detections += [(0, float(rng.uniform()), box) for _, box in truths[:4]]
        rescored = [(i, score ** 3 / 2.0, box) for i, score, box in detections]
        assert average_precision(rescored, truths) == pytest.approx(average_precision(detections, truths))

    def test_counted_flags_ignore_other_truths(self):
        small, large = (0.1, 0.1, 0.15, 0.15), (0.4, 0.4, 0.9, 0.9)
        detections = [(0, 0.9, large), (0, 0.5, small)]
        assert average_precision(detections, [(0, small), (0, large)], counted=[True, False]) == pytest.approx(1.0)

    def test_threshold_outside_unit_interval_rejected(self):
        with pytest.raises(ShapeError):
            average_precision([], [(0, (0.1, 0.1, 0.3, 0.3))], iou_threshold=1.0)


class TestEvaluateMap:

    def test_size_buckets(self):
        assert size_bucket(20 * 20) == "small"
        assert size_bucket(32 * 32) == "medium"
        assert size_bucket(96 * 96) == "large"

    def test_oracle_detector_scores_one(self, tiny_dataset):
        detections = [[Detection(a.class_id, 1.0, a.box) for a in anns] for anns in tiny_dataset.annotations]
        result = evaluate_map(detections, tiny_dataset.annotations, 3, (32, 32))
        assert result.map == pytest.approx(1.0)
        assert result.ap_small == pytest.approx(1.0)
        assert result.ap_large is None
        assert result.bucket_counts["small"] == sum(len(a) for a in tiny_dataset.annotations)

    def test_empty_detector_scores_zero(self, tiny_dataset):
        result = evaluate_map([[] for _ in tiny_dataset.annotations], tiny_dataset.annotations, 3, (32, 32))
        assert result.map == 0.0
        assert all(ap in (None, 0.0) for ap in result.per_class.values())

    def test_class_without_truths_is_undefined(self):
        annotations = [[Annotation(1, (0.1, 0.1, 0.4, 0.4))]]
        detections = [[Detection(1, 0.9, (0.1, 0.1, 0.4, 0.4)), Detection(2, 0.8, (0.5, 0.5, 0.9, 0.9))]]
        result = evaluate_map(detections, annotations, 2, (96, 96))
        assert result.per_class == {1: pytest.approx(1.0), 2: None}
        assert result.map == pytest.approx(1.0)
        assert result.truth_counts == {1: 1, 2: 0}

    def test_buckets_split_by_pixel_area(self):
        small = Annotation(1, (0.0, 0.0, 20 / 96, 20 / 96))
        medium = Annotation(1, (0.5, 0.5, 0.9, 0.9))
        detections = [[Detection(1, 0.9, medium.box)]]
        result = evaluate_map(detections, [[small, medium]], 1, (96, 96))
        assert result.bucket_counts == {"small": 1, "medium": 1, "large": 0}
        assert result.ap_small == 0.0
        assert result.ap_medium == pytest.approx(1.0)
        assert result.ap_large is None
        assert result.map == pytest.approx(0.5)

    def test_bucket_uses_whole_pixel_area(self):
        edge = (10 / 96, 10 / 96, 42 / 96, 42 / 96)
        assert pixel_area(edge, (96, 96)) == 32 * 32
        assert pixel_area((0.1, 0.25, 0.3, 0.75), (40, 100)) == 20 * 20
        result = evaluate_map([[]], [[Annotation(1, edge)]], 1, (96, 96))
        assert result.bucket_counts == {"small": 0, "medium": 1, "large": 0}

    def test_matches_per_class_brute_force(self, rng):
        canvas = 192
        sides = (12, 24, 40, 70, 110, 150)
        for _ in range(20):
            annotations, detections, pixel_areas = [], [], []
            for _ in range(3):
                anns, dets = [], []
                for _ in range(int(rng.integers(1, 6))):
                    w, h = (int(s) for s in rng.choice(sides, size=2))
                    x0, y0 = int(rng.integers(0, canvas - w + 1)), int(rng.integers(0, canvas - h + 1))
                    box = (x0 / canvas, y0 / canvas, (x0 + w) / canvas, (y0 + h) / canvas)
                    ann = Annotation(int(rng.integers(1, 4)), box)
                    anns.append(ann)
                    pixel_areas.append(w * h)
                    if rng.uniform() < 0.7:
                        shift = rng.integers(-3, 4, size=2) / canvas
                        shifted = (box[0] + shift[0], box[1] + shift[1], box[2] + shift[0], box[3] + shift[1])
                        label = ann.class_id if rng.uniform() < 0.9 else int(rng.integers(1, 4))
                        dets.append(Detection(label, float(rng.uniform()), shifted))
                for _ in range(int(rng.integers(0, 4))):
                    x0, y0 = rng.uniform(0.0, 0.7, size=2)
                    dets.append(Detection(int(rng.integers(1, 4)), float(rng.uniform()), (x0, y0, x0 + 0.2, y0 + 0.2)))
                annotations.append(anns)
                detections.append(dets)

            truth_area = iter(pixel_areas)
            truths_by_class = {c: [] for c in (1, 2, 3)}
            area_by_class = {c: [] for c in (1, 2, 3)}
            for i, anns in enumerate(annotations):
                for ann in anns:
                    truths_by_class[ann.class_id].append((i, ann.box))
                    area_by_class[ann.class_id].append(next(truth_area))
            per_class, buckets = {}, {"small": [], "medium": [], "large": []}
            for c in (1, 2, 3):
                scored = [(i, d.score, d.box) for i, dets in enumerate(detections) for d in dets if d.class_id == c]
                per_class[c] = brute_force_ap(scored, truths_by_class[c], 0.5)
                for name, lo, hi in (("small", 0, 32 * 32), ("medium", 32 * 32, 96 * 96), ("large", 96 * 96, np.inf)):
                    flags = [lo <= a < hi for a in area_by_class[c]]
                    buckets[name].append(brute_force_ap(scored, truths_by_class[c], 0.5, counted=flags))

            result = evaluate_map(detections, annotations, 3, (canvas, canvas))
            for c in (1, 2, 3):
                assert_same_ap(result.per_class[c], per_class[c])
            assert_same_ap(result.map, mean_defined(per_class.values()) or 0.0)
            assert_same_ap(result.ap_small, mean_defined(buckets["small"]))
            assert_same_ap(result.ap_medium, mean_defined(buckets["medium"]))
            assert_same_ap(result.ap_large, mean_defined(buckets["large"]))

    def test_named_classes_in_summary(self):
        annotations = [[Annotation(2, (0.1, 0.1, 0.4, 0.4))]]
        result = evaluate_map([[]], annotations, 2, (96, 96))
        summary = result.to_dict(["circle", "square"])
        assert summary["per_class"] == {"circle": None, "square": 0.0}

    def test_empty_set_rejected(self):
        with pytest.raises(ShapeError):
            evaluate_map([], [], 3, (96, 96))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            evaluate_map([[]], [[], []], 3, (96, 96))
