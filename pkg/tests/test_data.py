"""Unit tests for dataset loading, image preprocessing, augmentation and synthetic data."""

import os
import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np
from PIL import Image

from src.fpt_plus.data import (
    AugmentParams, apply_augment, augment_low, load_dataset, load_high, load_low, read_image,
    resize, synth_dataset,
)
from src.fpt_plus.errors import ContractError, DataError


def _stamp_score(gray: np.ndarray, window: int) -> float:
    """Largest mean |horizontal difference| over any window x window box."""
    diff = np.abs(np.diff(gray.astype(np.float64), axis=1))
    integral = np.pad(diff.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    sums = (integral[window:, window:] - integral[:-window, window:]
            - integral[window:, :-window] + integral[:-window, :-window])
    return float(sums.max()) / (window * window)


class TestDatasetFile(unittest.TestCase):
    """labels.csv parsing."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def _write(self, text):
        with open(os.path.join(self.temp_dir, "labels.csv"), "w") as f:
            f.write(text)

    def test_load_and_split(self):
        self._write("file,label,split\na.png,0,train\nb.png,1,val\nc.png,1,train\n")
        dataset = load_dataset(self.temp_dir)
        self.assertEqual(len(dataset), 3)
        self.assertEqual(dataset.class_count, 2)
        self.assertEqual([i.file for i in dataset.split("train")], ["a.png", "c.png"])
        np.testing.assert_array_equal(dataset.labels(), [0, 1, 1])
        self.assertEqual(dataset.path(dataset.items[0]), Path(self.temp_dir) / "a.png")

    def test_missing_file(self):
        with self.assertRaises(DataError):
            load_dataset(self.temp_dir)

    def test_bad_header(self):
        self._write("path,label\na.png,0\n")
        with self.assertRaises(DataError):
            load_dataset(self.temp_dir)

    def test_bad_rows(self):
        for body in ("a.png,zero,train\n", "a.png,0,holdout\n", "a.png,0\n"):
            self._write("file,label,split\n" + body)
            with self.assertRaises(DataError, msg=body):
                load_dataset(self.temp_dir)

    def test_label_outside_class_count(self):
        self._write("file,label,split\na.png,3,train\n")
        with self.assertRaises(DataError):
            load_dataset(self.temp_dir, class_count=2)

    def test_unknown_split_name(self):
        self._write("file,label,split\na.png,0,train\n")
        with self.assertRaises(ContractError):
            load_dataset(self.temp_dir).split("holdout")


class TestPixels(unittest.TestCase):
    """Decoding and resizing."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_read_rgb_and_gray(self):
        pixels = np.arange(48, dtype=np.uint8).reshape(4, 4, 3)
        path = os.path.join(self.temp_dir, "rgb.png")
        Image.fromarray(pixels).save(path)
        image = read_image(path)
        self.assertEqual(image.shape, (4, 4, 3))
        np.testing.assert_allclose(image, pixels / 255.0, atol=1e-7)
        self.assertEqual(read_image(path, channels=1).shape, (4, 4, 1))

    def test_read_pgm(self):
        path = os.path.join(self.temp_dir, "gray.pgm")
        Image.fromarray(np.full((8, 8), 255, dtype=np.uint8)).save(path)
        np.testing.assert_array_equal(read_image(path), np.ones((8, 8, 3), dtype=np.float32))

    def test_undecodable_file(self):
        path = os.path.join(self.temp_dir, "broken.png")
        with open(path, "wb") as f:
            f.write(b"not an image")
        with self.assertRaises(DataError):
            read_image(path)

    def test_resize(self):
        constant = np.full((16, 16, 3), 0.25, dtype=np.float32)
        np.testing.assert_allclose(resize(constant, 8), np.full((8, 8, 3), 0.25), atol=1e-6)
        same = resize(constant, 16)
        self.assertIsNot(same, constant)
        np.testing.assert_array_equal(same, constant)

    def test_load_high_and_low(self):
        path = os.path.join(self.temp_dir, "img.png")
        Image.fromarray(np.full((20, 20, 3), 255, dtype=np.uint8)).save(path)
        high = load_high(path, 32)
        low = load_low(path, 32, 16)
        self.assertEqual(high.shape, (32, 32, 3))
        self.assertEqual(low.shape, (16, 16, 3))
        np.testing.assert_allclose(high, np.ones_like(high), atol=1e-5)
        self.assertEqual(high.dtype, np.float32)


class TestAugment(unittest.TestCase):
    """Side-input augmentation."""

    def setUp(self):
        self.image = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)

    def test_identity_is_bitwise_noop(self):
        out = apply_augment(self.image, AugmentParams.identity(16))
        self.assertEqual(out.tobytes(), self.image.tobytes())

    def test_flip_only(self):
        params = AugmentParams((0.0, 0.0, 16.0, 16.0), True, 0.0, 0.0)
        np.testing.assert_array_equal(apply_augment(self.image, params), self.image[:, ::-1, :])

    def test_same_seed_same_output(self):
        a = augment_low(self.image, np.random.default_rng(9))
        b = augment_low(self.image, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_range_and_shape(self):
        """1000 draws stay in [0, 1] with the input shape."""
        rng = np.random.default_rng(1)
        for _ in range(1000):
            out = augment_low(self.image, rng)
            self.assertEqual(out.shape, self.image.shape)
            self.assertGreaterEqual(float(out.min()), 0.0)
            self.assertLessEqual(float(out.max()), 1.0)

    def test_crop_box_inside_image(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            left, top, right, bottom = AugmentParams.draw(rng, 16).crop_box
            self.assertGreaterEqual(left, 0.0)
            self.assertGreaterEqual(top, 0.0)
            self.assertLessEqual(right, 16.0 + 1e-9)
            self.assertLessEqual(bottom, 16.0 + 1e-9)
            self.assertGreaterEqual((right - left) ** 2, 0.7 * 256 - 1e-6)


class TestSynthetic(unittest.TestCase):
    """Synthetic stamp-detection datasets."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_balanced_labels_and_splits(self):
        dataset = synth_dataset(0, 100, 2, 64, self.temp_dir, stamp=16)
        self.assertEqual(int((dataset.labels() == 1).sum()), 50)
        self.assertEqual(len(dataset.split("test")), 20)
        self.assertEqual(len(dataset.split("val")), 10)
        self.assertEqual(len(dataset.split("train")), 70)
        reloaded = load_dataset(self.temp_dir)
        self.assertEqual(reloaded.items, dataset.items)

    def test_same_seed_byte_identical(self):
        first = os.path.join(self.temp_dir, "a")
        second = os.path.join(self.temp_dir, "b")
        dataset = synth_dataset(3, 6, 3, 64, first, stamp=16)
        synth_dataset(3, 6, 3, 64, second, stamp=16)
        for item in dataset:
            with open(os.path.join(first, item.file), "rb") as fa, open(os.path.join(second, item.file), "rb") as fb:
                self.assertEqual(fa.read(), fb.read())
        with open(os.path.join(first, "labels.csv"), "rb") as fa, open(os.path.join(second, "labels.csv"), "rb") as fb:
            self.assertEqual(fa.read(), fb.read())

    def test_invalid_arguments(self):
        with self.assertRaises(ContractError):
            synth_dataset(0, 10, 1, 64, self.temp_dir)
        with self.assertRaises(ContractError):
            synth_dataset(0, 10, 3, 64, self.temp_dir, stamp=48)

    def test_stamp_visible_only_at_high_resolution(self):
        """A fixed detector finds the stamp at full size and loses it after halving the resolution."""
        dataset = synth_dataset(1, 40, 2, 128, self.temp_dir, stamp=32)
        labels = dataset.labels()
        high_hits, low_hits = [], []
        for item in dataset:
            image = read_image(dataset.path(item))
            high_hits.append(_stamp_score(image[:, :, 0], 32) > 0.2)
            low_hits.append(_stamp_score(resize(image, 64)[:, :, 0], 16) > 0.2)
        high_acc = float(np.mean(np.array(high_hits) == (labels == 1)))
        low_acc = float(np.mean(np.array(low_hits) == (labels == 1)))
        self.assertGreaterEqual(high_acc, 0.95)
        self.assertLessEqual(low_acc, 0.70)


if __name__ == '__main__':
    unittest.main()
