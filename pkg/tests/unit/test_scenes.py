"""
Unit tests for the synthetic scene corpus and PNG ingestion
"""

import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', '..'))

from src.utils.error_handler import DataError
from src.utils.run_logger import initialize_run_logger
from src.utils.scenes import (MANIFEST_FILE, SceneObject, SceneSpec, ShapeKind, ingest_png, load_png,
                              make_corpus, render, save_png)

WHITE = (1.0, 1.0, 1.0)


class TestRender(unittest.TestCase):
    """Test cases for scene specs and rendering"""

    def setUp(self):
        self.spec = SceneSpec((SceneObject(ShapeKind.DISK, 0.25, 0.25, 0.1, WHITE),
                               SceneObject(ShapeKind.SQUARE, 0.7, 0.7, 0.1, (1.0, -1.0, -1.0))))

    def test_shape_and_range(self):
        """Test output layout and value range"""
        image = render(self.spec, (16, 24))
        self.assertEqual(image.shape, (3, 16, 24))
        self.assertEqual(image.dtype, np.float32)
        self.assertGreaterEqual(image.min(), -1.0)
        self.assertLessEqual(image.max(), 1.0)

    def test_label_is_count(self):
        """Test the default class label"""
        self.assertEqual(self.spec.class_label, 2)
        self.assertEqual(SceneSpec(self.spec.objects, label=0).class_label, 0)

    def test_resolution_independent(self):
        """Test that a higher render area-averages to the lower one"""
        low = render(self.spec, 16, supersample=8)
        high = render(self.spec, 32, supersample=4)
        reduced = high.reshape(3, 16, 2, 16, 2).mean(axis=(2, 4))
        np.testing.assert_allclose(reduced, low, atol=1e-5)

    def test_disk_area(self):
        """Test a centred disk covers pi * r^2 of the image"""
        spec = SceneSpec((SceneObject(ShapeKind.DISK, 0.5, 0.5, 0.25, WHITE),))
        image = render(spec, 64)
        coverage = (image[0] - spec.background[0]) / (WHITE[0] - spec.background[0])
        self.assertAlmostEqual(float(coverage.mean()) / (np.pi * 0.25 ** 2), 1.0, delta=0.02)

    def test_too_small(self):
        """Test renders below 8 pixels"""
        with self.assertRaises(DataError):
            render(self.spec, 4)

    def test_overlap_rejected(self):
        """Test that touching objects fail validation"""
        spec = SceneSpec((SceneObject(ShapeKind.DISK, 0.5, 0.5, 0.1, WHITE),
                          SceneObject(ShapeKind.TRIANGLE, 0.55, 0.5, 0.1, WHITE)))
        with self.assertRaises(DataError):
            spec.validate()

    def test_dict_form(self):
        """Test that the serialized form rebuilds the same spec"""
        self.assertEqual(SceneSpec.from_dict(self.spec.to_dict()).spec_hash(), self.spec.spec_hash())


class TestCorpus(unittest.TestCase):
    """Test cases for make_corpus"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_deterministic(self):
        """Test that the corpus is a function of its seed"""
        a = make_corpus(11, 6, 3)
        b = make_corpus(11, 6, 3)
        c = make_corpus(12, 6, 3)
        self.assertEqual(a.manifest_hash(), b.manifest_hash())
        self.assertNotEqual(a.manifest_hash(), c.manifest_hash())

    def test_splits_disjoint(self):
        """Test that no scene appears in both splits"""
        corpus = make_corpus(0, 20, 10)
        self.assertEqual((len(corpus.train), len(corpus.eval)), (20, 10))
        self.assertFalse(set(corpus.train.spec_hashes()) & set(corpus.eval.spec_hashes()))
        self.assertEqual(corpus.manifest()["splits"], {"train": [0, 20], "eval": [20, 30]})

    def test_labels_in_range(self):
        """Test object counts stay within the configured bounds"""
        corpus = make_corpus(3, 30, 5, min_objects=2, max_objects=3)
        labels = corpus.train.labels()
        self.assertTrue(np.all((labels >= 2) & (labels <= 3)))

    def test_label_histogram_uniform(self):
        """Test that object counts are uniform over 10,000 scenes within 5%"""
        corpus = make_corpus(1234, 10000, 1)
        labels = corpus.train.labels()
        for k in range(1, 5):
            frequency = float(np.mean(labels == k))
            self.assertLess(abs(frequency - 0.25) / 0.25, 0.05, f"count {k} has frequency {frequency}")

    def test_batch(self):
        """Test batch shapes at an arbitrary resolution"""
        corpus = make_corpus(0, 4, 2)
        images, labels = corpus.train.sample_batch(np.random.default_rng(0), 3, (16, 16))
        self.assertEqual(images.shape, (3, 3, 16, 16))
        self.assertEqual(labels.shape, (3,))

    def test_small_base_keeps_layout_margins(self):
        """Test that an 8x8 base still places up to four objects"""
        corpus = make_corpus(0, 6, 2, base_resolution=8, target_resolution=16, max_objects=4)
        for spec in corpus.train.specs:
            spec.validate()

    def test_empty_split(self):
        """Test that both splits must be non-empty"""
        with self.assertRaises(DataError):
            make_corpus(0, 5, 0)

    def test_png_cache(self):
        """Test that caching writes one file per scene and resolution"""
        corpus = make_corpus(0, 2, 1, cache_dir=self.test_dir)
        self.assertEqual(len(corpus.cached_files), 6)
        for path in corpus.cached_files.values():
            self.assertTrue(os.path.exists(path))
        self.assertTrue(os.path.exists(os.path.join(self.test_dir, MANIFEST_FILE)))

    def test_manifest_written(self):
        """Test the manifest file"""
        path = os.path.join(self.test_dir, "manifest.json")
        make_corpus(0, 2, 1).write_manifest(path)
        self.assertTrue(os.path.exists(path))


class TestPngIngest(unittest.TestCase):
    """Test cases for PNG save, load and directory ingestion"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()
        initialize_run_logger(log_directory=os.path.join(self.test_dir, "logs"))
        self.png_dir = os.path.join(self.test_dir, "pngs")
        corpus = make_corpus(5, 5, 1)
        for i, spec in enumerate(corpus.train.specs):
            save_png(render(spec, 16), os.path.join(self.png_dir, f"img_{i}.png"))

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_save_and_load(self):
        """Test that quantization error stays within one 8-bit step"""
        image = render(make_corpus(1, 1, 1).train.specs[0], 16)
        path = os.path.join(self.test_dir, "one.png")
        save_png(image, path, {"seed": 1})
        np.testing.assert_allclose(load_png(path, 16), image, atol=2.0 / 255.0)

    def test_ingest_and_split(self):
        """Test that the split holds out the last files in sorted order"""
        dataset = ingest_png(self.png_dir, 16)
        self.assertEqual(len(dataset), 5)
        train, held_out = dataset.split(2)
        self.assertEqual(len(train), 3)
        self.assertEqual([os.path.basename(p) for p in held_out.paths], ["img_3.png", "img_4.png"])

    def test_ingest_downsamples(self):
        """Test serving stored images at a lower resolution"""
        dataset = ingest_png(self.png_dir, 16)
        self.assertEqual(dataset.images([0, 1], 8).shape, (2, 3, 8, 8))
        with self.assertRaises(DataError):
            dataset.images([0], 12)

    def test_unreadable_file_skipped(self):
        """Test that a corrupt PNG is skipped"""
        with open(os.path.join(self.png_dir, "zz_broken.png"), "wb") as f:
            f.write(b"not a png")
        self.assertEqual(len(ingest_png(self.png_dir, 16)), 5)

    def test_missing_directory(self):
        """Test a directory that does not exist"""
        with self.assertRaises(DataError):
            ingest_png(os.path.join(self.test_dir, "absent"), 16)

    def test_split_bounds(self):
        """Test holding out every image"""
        with self.assertRaises(DataError):
            ingest_png(self.png_dir, 16).split(5)


if __name__ == '__main__':
    unittest.main()
