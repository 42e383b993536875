import math
import unittest

import numpy as np

from collabdet.errors import EmptyProposalError, InvalidInputError
from collabdet.geometry import nms
from collabdet.nn_substrate import Tensor, grad_check, parameter
from collabdet.parameter_registry import ParameterRegistry
from collabdet.weak_detector import (
    ImageLabel,
    WeakDetector,
    filter_detections,
    image_classification_loss,
    maxout,
    scores_from_logits,
)


class TestImageLabel(unittest.TestCase):
    def test_positive_classes(self):
        self.assertEqual(ImageLabel([0, 1, 1, 0]).positive_classes, [1, 2])

    def test_non_binary_rejected(self):
        with self.assertRaises(InvalidInputError):
            ImageLabel([0, 0.5])


class TestScoreRegions(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(0)

    def test_two_stream_aggregation_matches_brute_force(self):
        for _ in range(20):
            regions, classes = int(self.rng.integers(1, 9)), int(self.rng.integers(2, 6))
            cls_logits = self.rng.normal(0.0, 3.0, size=(regions, classes))
            loc_logits = self.rng.normal(0.0, 3.0, size=(regions, classes))
            scores = scores_from_logits(Tensor(cls_logits), Tensor(loc_logits))
            s_cls = np.exp(cls_logits) / np.exp(cls_logits).sum(axis=1, keepdims=True)
            s_loc = np.exp(loc_logits) / np.exp(loc_logits).sum(axis=0, keepdims=True)
            expected = [sum(s_cls[j, c] * s_loc[j, c] for j in range(regions)) for c in range(classes)]
            np.testing.assert_allclose(scores.y_hat.values, expected, rtol=0, atol=1e-9)
            np.testing.assert_allclose(scores.s_cls.values.sum(axis=1), 1.0, atol=1e-9)
            np.testing.assert_allclose(scores.s_loc.values.sum(axis=0), 1.0, atol=1e-9)
            self.assertTrue(np.all(scores.y_hat.values > 0.0))
            self.assertTrue(np.all(scores.y_hat.values < 1.0))

    def test_single_region_passes_class_scores_through(self):
        scores = scores_from_logits(Tensor([[0.3, -1.0, 2.0]]), Tensor([[5.0, -2.0, 0.1]]))
        np.testing.assert_allclose(scores.s_loc.values, 1.0)
        np.testing.assert_allclose(scores.y_hat.values, scores.s_cls.values[0])

    def test_hand_evaluated_class_score(self):
        # s_cls rows (0.6, 0.4) and (0.4, 0.6); s_loc column 0 is (0.75, 0.25)
        cls_logits = np.log([[0.6, 0.4], [0.4, 0.6]])
        loc_logits = np.log([[0.75, 0.5], [0.25, 0.5]])
        scores = scores_from_logits(Tensor(cls_logits), Tensor(loc_logits))
        self.assertAlmostEqual(scores.y_hat.values[0], 0.6 * 0.75 + 0.4 * 0.25, places=12)

    def test_empty_region_set(self):
        registry = ParameterRegistry()
        detector = WeakDetector(registry, self.rng, n_classes=3, in_width=4, hidden_width=4)
        with self.assertRaises(EmptyProposalError):
            detector.score_regions(Tensor(np.zeros((0, 4))))

    def test_detector_head_shapes(self):
        registry = ParameterRegistry()
        detector = WeakDetector(registry, self.rng, n_classes=3, in_width=4, hidden_width=5)
        scores = detector.score_regions(Tensor(self.rng.normal(size=(7, 4))))
        self.assertEqual(scores.p.shape, (7, 3))
        self.assertEqual(scores.y_hat.shape, (3,))
        self.assertEqual(registry.names("weak"), ["weak/fc_w", "weak/fc_b", "weak/cls_w", "weak/cls_b",
                                                  "weak/loc_w", "weak/loc_b"])


class TestImageClassificationLoss(unittest.TestCase):
    def test_half_probability_single_class(self):
        loss = image_classification_loss(Tensor([0.5]), ImageLabel([1]))
        self.assertAlmostEqual(loss.item(), math.log(2.0), places=12)

    def test_near_perfect_prediction(self):
        loss = image_classification_loss(Tensor([1.0 - 1e-12, 1e-12]), ImageLabel([1, 0]))
        self.assertLess(loss.item(), 1e-6)

    def test_shape_mismatch(self):
        with self.assertRaises(InvalidInputError):
            image_classification_loss(Tensor([0.5, 0.5]), ImageLabel([1]))

    def test_non_binary_label(self):
        with self.assertRaises(InvalidInputError):
            image_classification_loss(Tensor([0.5]), [2])

    def test_gradient_through_both_streams(self):
        rng = np.random.default_rng(4)
        cls_logits = parameter(rng.normal(size=(5, 3)), name="cls")
        loc_logits = parameter(rng.normal(size=(5, 3)), name="loc")
        label = ImageLabel([1, 0, 1])

        def fn():
            return image_classification_loss(scores_from_logits(cls_logits, loc_logits).y_hat, label)

        self.assertLess(grad_check(fn, [cls_logits, loc_logits]), 1e-4)


class TestMaxout(unittest.TestCase):
    def test_picks_argmax_for_positive_class(self):
        p = np.array([[0.1, 0.3], [0.5, 0.2], [0.4, 0.9]])
        targets = maxout(p, ImageLabel([1, 0]))
        np.testing.assert_array_equal(targets.p_hat[:, 0], [0, 1, 0])
        np.testing.assert_array_equal(targets.p_hat[:, 1], [0, 0, 0])
        self.assertEqual(targets.selected, {0: 1})

    def test_one_unit_entry_per_positive_class(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            p = rng.uniform(size=(8, 4))
            y = rng.integers(0, 2, size=4)
            targets = maxout(p, ImageLabel(y))
            np.testing.assert_array_equal(targets.p_hat.sum(axis=0), y)
            self.assertEqual(targets.p_hat.sum(), y.sum())
            self.assertTrue(set(np.unique(targets.p_hat)) <= {0.0, 1.0})

    def test_positive_rescaling_keeps_selection(self):
        rng = np.random.default_rng(10)
        p = rng.uniform(size=(6, 3))
        scaled = p * np.array([3.0, 0.01, 42.0])
        label = ImageLabel([1, 1, 1])
        self.assertEqual(maxout(p, label).selected, maxout(scaled, label).selected)

    def test_ties_go_to_lowest_region(self):
        targets = maxout(np.array([[0.5], [0.5]]), ImageLabel([1]))
        self.assertEqual(targets.selected, {0: 0})

    def test_pseudo_boxes(self):
        boxes = np.array([[0, 0, 4, 4], [2, 2, 8, 8]], dtype=float)
        targets = maxout(np.array([[0.2, 0.7], [0.8, 0.1]]), ImageLabel([1, 1]))
        pseudo = targets.pseudo_boxes(boxes)
        self.assertEqual([c for c, _ in pseudo], [0, 1])
        np.testing.assert_array_equal(pseudo[0][1], boxes[1])
        np.testing.assert_array_equal(pseudo[1][1], boxes[0])


class TestFilterDetections(unittest.TestCase):
    def test_single_proposal_above_threshold(self):
        detections = filter_detections(np.array([[0, 0, 5, 5]], dtype=float), np.array([[0.4, 0.0001]]), 1e-3, 0.6)
        self.assertEqual(len(detections), 1)
        box, c, score = detections[0]
        self.assertEqual((c, score), (0, 0.4))
        np.testing.assert_array_equal(box, [0, 0, 5, 5])

    def test_duplicates_suppressed(self):
        boxes = np.array([[0, 0, 5, 5], [0, 0, 5, 5]], dtype=float)
        detections = filter_detections(boxes, np.array([[0.2], [0.6]]), 1e-3, 0.6)
        self.assertEqual([score for _, _, score in detections], [0.6])

    def test_matches_filter_then_nms_oracle(self):
        rng = np.random.default_rng(12)
        x1 = rng.uniform(0, 40, size=30)
        y1 = rng.uniform(0, 40, size=30)
        boxes = np.stack([x1, y1, x1 + rng.uniform(4, 20, 30), y1 + rng.uniform(4, 20, 30)], axis=1)
        scores = rng.uniform(0, 0.2, size=(30, 2))
        detections = filter_detections(boxes, scores, 0.05, 0.6)
        for c in range(2):
            index = np.flatnonzero(scores[:, c] > 0.05)
            expected = [int(index[k]) for k in nms(boxes[index], scores[index, c], 0.6)]
            got = [det for det in detections if det[1] == c]
            self.assertEqual(len(got), len(expected))
            for (box, _, score), i in zip(got, expected):
                np.testing.assert_array_equal(box, boxes[i])
                self.assertEqual(score, scores[i, c])


if __name__ == "__main__":
    unittest.main()
