import dataclasses
import os
import shutil
import tempfile
import unittest
from collections import Counter

import numpy as np

from collabdet.errors import ConfigurationError, InvalidInputError
from collabdet.geometry import Box, iou_matrix
from collabdet.synthetic_data import (
    SHAPE_NAMES,
    augment,
    draw_shape,
    generate_dataset,
    image_bytes,
    load_dataset,
    manifest_text,
    parse_image,
    pixels_to_surface,
    rescaled_size,
    save_dataset,
    surface_to_pixels,
)


class TestGenerateDataset(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.dataset = generate_dataset(seed=3, n_train=24, n_test=6, n_classes=3, image_size=32)

    def test_split_sizes_and_ids(self):
        self.assertEqual(len(self.dataset.split("train")), 24)
        self.assertEqual(len(self.dataset.split("test")), 6)
        self.assertEqual(self.dataset.split("train")[0].scene_id, "train_0000")
        self.assertEqual(self.dataset.split("test")[5].scene_id, "test_0005")
        self.assertEqual(self.dataset.class_names, list(SHAPE_NAMES[:3]))

    def test_unknown_split(self):
        with self.assertRaises(ConfigurationError):
            self.dataset.split("val")

    def test_label_matches_ground_truth_classes(self):
        for scene in self.dataset.scenes:
            self.assertEqual(scene.label.positive_classes, sorted({c for _, c in scene.gt_boxes}))
            self.assertTrue(1 <= len(scene.gt_boxes) <= 3)

    def test_boxes_inside_image_and_barely_overlapping(self):
        for scene in self.dataset.scenes:
            boxes, _ = scene.gt_arrays()
            self.assertTrue(np.all(boxes[:, :2] >= 0) and np.all(boxes[:, 2:] <= 32))
            self.assertTrue(np.all(boxes[:, 2:] - boxes[:, :2] >= 6))
            if len(boxes) > 1:
                overlaps = iou_matrix(boxes, boxes)
                np.fill_diagonal(overlaps, 0.0)
                self.assertLessEqual(overlaps.max(), 0.3)

    def test_class_frequencies_are_balanced(self):
        counts = Counter(c for scene in self.dataset.scenes for _, c in scene.gt_boxes)
        mean = sum(counts.values()) / 3.0
        for c in range(3):
            self.assertLessEqual(abs(counts[c] - mean), 0.15 * mean)

    def test_pixels(self):
        scene = self.dataset.scenes[0]
        self.assertEqual(scene.pixels.shape, (32, 32, 3))
        self.assertEqual(scene.pixels.dtype, np.uint8)
        self.assertTrue(0.0 <= scene.image.min() and scene.image.max() <= 1.0)

    def test_same_seed_same_dataset(self):
        again = generate_dataset(seed=3, n_train=24, n_test=6, n_classes=3, image_size=32)
        self.assertEqual(manifest_text(again), manifest_text(self.dataset))
        for a, b in zip(again.scenes, self.dataset.scenes):
            np.testing.assert_array_equal(a.pixels, b.pixels)

    def test_different_seed_differs(self):
        other = generate_dataset(seed=4, n_train=24, n_test=6, n_classes=3, image_size=32)
        self.assertNotEqual(manifest_text(other), manifest_text(self.dataset))

    def test_invalid_parameters(self):
        with self.assertRaises(ConfigurationError):
            generate_dataset(n_classes=1)
        with self.assertRaises(ConfigurationError):
            generate_dataset(n_classes=6)
        with self.assertRaises(ConfigurationError):
            generate_dataset(image_size=30)


class TestStorage(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_save_and_load(self):
        dataset = generate_dataset(seed=1, n_train=4, n_test=2, n_classes=2, image_size=32)
        save_dataset(dataset, self.directory)
        loaded = load_dataset(self.directory)
        self.assertEqual(manifest_text(loaded), manifest_text(dataset))
        for a, b in zip(loaded.scenes, dataset.scenes):
            np.testing.assert_array_equal(a.pixels, b.pixels)
            self.assertEqual(a.label, b.label)
            self.assertEqual(a.gt_boxes, b.gt_boxes)

    def test_missing_manifest(self):
        with self.assertRaises(ConfigurationError):
            load_dataset(os.path.join(self.directory, "nothing"))

    def test_missing_image(self):
        dataset = generate_dataset(seed=1, n_train=1, n_test=0, n_classes=2, image_size=32)
        save_dataset(dataset, self.directory)
        os.remove(os.path.join(self.directory, "images", "train_0000.rgb"))
        with self.assertRaises(ConfigurationError):
            load_dataset(self.directory)

    def test_truncated_image(self):
        data = image_bytes(np.zeros((4, 4, 3), dtype=np.uint8))
        with self.assertRaises(ConfigurationError):
            parse_image(data[:-1])


class TestRendering(unittest.TestCase):
    def test_every_shape_paints_inside_its_box(self):
        for shape in SHAPE_NAMES:
            surface = pixels_to_surface(np.zeros((32, 32, 3), dtype=np.uint8))
            draw_shape(surface, shape, (8, 8, 16, 16), (255, 255, 255))
            pixels = surface_to_pixels(surface)
            painted = np.argwhere(pixels.sum(axis=2) > 0)
            self.assertGreater(len(painted), 0, shape)
            self.assertTrue(np.all(painted >= 8) and np.all(painted < 24), shape)

    def test_unknown_shape(self):
        surface = pixels_to_surface(np.zeros((8, 8, 3), dtype=np.uint8))
        with self.assertRaises(InvalidInputError):
            draw_shape(surface, "star", (0, 0, 4, 4), (255, 0, 0))


class TestAugment(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.scene = generate_dataset(seed=5, n_train=1, n_test=0, n_classes=3, image_size=64).scenes[0]

    def test_flip_mirrors_boxes(self):
        scene = dataclasses.replace(self.scene, gt_boxes=[(Box(10, 10, 20, 20), 0)])
        flipped, transform = augment(scene, 0, scales=(1.0,), flip=True)
        self.assertTrue(transform.flipped)
        self.assertEqual(flipped.gt_boxes, [(Box(44, 10, 54, 20), 0)])
        np.testing.assert_array_equal(flipped.pixels, scene.pixels[:, ::-1])

    def test_double_flip_is_identity(self):
        once, _ = augment(self.scene, 0, scales=(1.0,), flip=True)
        twice, _ = augment(once, 0, scales=(1.0,), flip=True)
        np.testing.assert_array_equal(twice.pixels, self.scene.pixels)
        self.assertEqual(twice.gt_boxes, self.scene.gt_boxes)

    def test_label_unchanged(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            augmented, _ = augment(self.scene, rng)
            self.assertEqual(augmented.label, self.scene.label)

    def test_rescale(self):
        scaled, transform = augment(self.scene, 0, scales=(0.75,), flip=False)
        self.assertEqual(scaled.pixels.shape, (48, 48, 3))
        self.assertEqual(transform.scale_x, 0.75)
        for (box, c), (original, c0) in zip(scaled.gt_boxes, self.scene.gt_boxes):
            self.assertEqual(c, c0)
            np.testing.assert_allclose(box.as_array(), original.as_array() * 0.75)

    def test_rescaled_size_is_multiple_of_four(self):
        for size in (32, 64, 100):
            for scale in (0.75, 1.0, 1.25):
                self.assertEqual(rescaled_size(size, scale) % 4, 0)


if __name__ == "__main__":
    unittest.main()
