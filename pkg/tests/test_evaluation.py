import os
import shutil
import tempfile
import unittest

import numpy as np

from collabdet.errors import ConfigurationError, InvalidInputError
from collabdet.evaluation import (
    DetectionRecord,
    average_precision,
    corloc,
    mean_average_precision,
    read_detections_csv,
    records_from_detections,
    top_detections_from_records,
    write_detections_csv,
)
from collabdet.geometry import Box
from collabdet.weak_detector import ImageLabel


def _pair_iou(a, b):
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _reference_ap(records, gt, c):
    """Quadratic evaluator written independently of the library."""
    n_positive = sum(1 for pairs in gt.values() for _, k in pairs if k == c)
    if n_positive == 0:
        return None
    ranked = sorted(enumerate(r for r in records if r.class_index == c), key=lambda e: (-e[1].score, e[0]))
    used = set()
    hits = []
    for _, record in ranked:
        best, best_iou = None, -1.0
        for g, (box, k) in enumerate(gt.get(record.image_id, [])):
            if k != c:
                continue
            value = _pair_iou(record.box, box)
            if value > best_iou:
                best, best_iou = g, value
        hit = best is not None and best_iou > 0.5 and (record.image_id, best) not in used
        if hit:
            used.add((record.image_id, best))
        hits.append(hit)
    recall, precision, found = [], [], 0
    for n, hit in enumerate(hits, start=1):
        found += hit
        recall.append(found / n_positive)
        precision.append(found / n)
    ap, previous = 0.0, 0.0
    for i, r in enumerate(recall):
        if r > previous:
            ap += (r - previous) * max(precision[i:])
            previous = r
    return ap


def _random_fixture(rng, n_images, n_classes):
    gt, records = {}, []
    for k in range(n_images):
        image_id = f"img{k}"
        pairs = []
        for _ in range(int(rng.integers(0, 4))):
            x, y = rng.uniform(0, 40, size=2)
            side = rng.uniform(6, 20)
            pairs.append((Box(x, y, x + side, y + side), int(rng.integers(n_classes))))
        gt[image_id] = pairs
        for box, c in pairs:
            for _ in range(int(rng.integers(0, 3))):
                jitter = rng.uniform(-4, 4, size=4)
                x1, y1 = box.x1 + jitter[0], box.y1 + jitter[1]
                records.append(DetectionRecord(image_id, c, float(rng.uniform()),
                                               Box(x1, y1, max(x1 + 1, box.x2 + jitter[2]),
                                                   max(y1 + 1, box.y2 + jitter[3]))))
        for _ in range(int(rng.integers(0, 3))):
            x, y = rng.uniform(0, 50, size=2)
            records.append(DetectionRecord(image_id, int(rng.integers(n_classes)), float(rng.uniform()),
                                           Box(x, y, x + 8, y + 8)))
    return records, gt


class TestAveragePrecision(unittest.TestCase):
    def setUp(self):
        self.gt = {"a": [(Box(0, 0, 10, 10), 0), (Box(20, 20, 30, 30), 0)]}

    def test_hand_computed_curve(self):
        records = [
            DetectionRecord("a", 0, 0.9, Box(0, 0, 10, 10)),
            DetectionRecord("a", 0, 0.8, Box(40, 40, 50, 50)),
            DetectionRecord("a", 0, 0.7, Box(20, 20, 30, 30)),
        ]
        self.assertAlmostEqual(average_precision(records, self.gt, 0), 5.0 / 6.0, places=12)

    def test_perfect_detections(self):
        records = [DetectionRecord("a", 0, 0.9, Box(0, 0, 10, 10)), DetectionRecord("a", 0, 0.8, Box(20, 20, 30, 30))]
        self.assertEqual(average_precision(records, self.gt, 0), 1.0)

    def test_low_overlap_is_a_miss(self):
        # IoU 0.3 with the first gt box
        records = [DetectionRecord("a", 0, 0.9, Box(0, 0, 10, 3))]
        self.assertEqual(average_precision(records, self.gt, 0), 0.0)

    def test_duplicate_detection_is_false_positive(self):
        records = [DetectionRecord("a", 0, 0.9, Box(0, 0, 10, 10)), DetectionRecord("a", 0, 0.8, Box(0, 0, 10, 10))]
        self.assertAlmostEqual(average_precision(records, self.gt, 0), 0.5, places=12)

    def test_class_without_ground_truth(self):
        self.assertIsNone(average_precision([], self.gt, 1))
        mean, per_class = mean_average_precision([], self.gt, 2)
        self.assertEqual(per_class, {0: 0.0})
        self.assertEqual(mean, 0.0)

    def test_no_detections_at_all(self):
        gt = {"a": [(Box(0, 0, 10, 10), 0)], "b": [(Box(5, 5, 20, 20), 1), (Box(30, 30, 40, 40), 2)]}
        mean, per_class = mean_average_precision([], gt, 3)
        self.assertEqual(per_class, {0: 0.0, 1: 0.0, 2: 0.0})
        self.assertEqual(mean, 0.0)

    def test_agrees_with_reference(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            records, gt = _random_fixture(rng, int(rng.integers(1, 11)), 3)
            mean, per_class = mean_average_precision(records, gt, 3)
            expected = {c: _reference_ap(records, gt, c) for c in range(3)}
            expected = {c: ap for c, ap in expected.items() if ap is not None}
            self.assertEqual(set(per_class), set(expected))
            for c, ap in expected.items():
                self.assertAlmostEqual(per_class[c], ap, delta=1e-9)
                self.assertTrue(0.0 <= per_class[c] <= 1.0)
            if expected:
                self.assertAlmostEqual(mean, float(np.mean(list(expected.values()))), delta=1e-9)


class TestCorLoc(unittest.TestCase):
    def test_half_of_six_images(self):
        gt, labels, top = {}, {}, {}
        for k in range(6):
            image_id = f"img{k}"
            gt[image_id] = [(Box(0, 0, 10, 10), 0)]
            labels[image_id] = ImageLabel([1, 0])
            if k < 3:
                top[(image_id, 0)] = Box(1, 0, 10, 10)
            elif k < 5:
                top[(image_id, 0)] = Box(30, 30, 40, 40)
        mean, per_class = corloc(top, gt, labels, 2)
        self.assertEqual(per_class, {0: 0.5})
        self.assertEqual(mean, 0.5)

    def test_disjoint_top_boxes_score_zero(self):
        gt, labels, top = {}, {}, {}
        for k in range(4):
            image_id = f"img{k}"
            gt[image_id] = [(Box(0, 0, 10, 10), 0), (Box(20, 0, 30, 10), 1)]
            labels[image_id] = ImageLabel([1, 1])
            top[(image_id, 0)] = Box(40, 40, 50, 50)
            top[(image_id, 1)] = Box(0, 20, 10, 30)
        mean, per_class = corloc(top, gt, labels, 2)
        self.assertEqual(per_class, {0: 0.0, 1: 0.0})
        self.assertEqual(mean, 0.0)

    def test_top_record_per_image_and_class(self):
        records = [
            DetectionRecord("a", 0, 0.4, Box(0, 0, 10, 10)),
            DetectionRecord("a", 0, 0.9, Box(30, 30, 40, 40)),
            DetectionRecord("a", 1, 0.2, Box(0, 0, 5, 5)),
        ]
        top = top_detections_from_records(records)
        self.assertEqual(top[("a", 0)], Box(30, 30, 40, 40))
        self.assertEqual(top[("a", 1)], Box(0, 0, 5, 5))
        _, per_class = corloc(top, {"a": [(Box(0, 0, 10, 10), 0)]}, {"a": ImageLabel([1, 0])}, 2)
        self.assertEqual(per_class, {0: 0.0})


class TestDetectionFiles(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_write_then_read(self):
        records = records_from_detections("img0", [(np.array([1.5, 2.0, 9.25, 12.0]), 1, 0.123456789),
                                                   (np.array([0.0, 0.0, 4.0, 4.0]), 0, 1.0)])
        path = write_detections_csv(os.path.join(self.directory, "sub", "dets.csv"), records)
        self.assertEqual(read_detections_csv(path), records)

    def test_bad_header(self):
        path = os.path.join(self.directory, "bad.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("image,score\n")
        with self.assertRaises(ConfigurationError):
            read_detections_csv(path)

    def test_missing_file(self):
        with self.assertRaises(ConfigurationError):
            read_detections_csv(os.path.join(self.directory, "none.csv"))

    def test_score_range(self):
        with self.assertRaises(InvalidInputError):
            DetectionRecord("a", 0, 1.5, Box(0, 0, 1, 1))


if __name__ == "__main__":
    unittest.main()
