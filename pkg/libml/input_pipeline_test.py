# coding=utf-8
# Copyright 2024 The DRSCL Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
# ==============================================================================
"""Tests for libml.input_pipeline."""

import gzip
import itertools
import os
import struct

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np

from libml import core
from libml import input_pipeline


def _idx_images(pixels: np.ndarray) -> bytes:
    count, rows, cols = pixels.shape
    return struct.pack(">IIII", 0x803, count, rows, cols) + pixels.astype(
        np.uint8).tobytes()


def _idx_labels(labels) -> bytes:
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


def _assert_disjoint(test, stream):
    for a, b in itertools.combinations(stream.label_spaces, 2):
        test.assertEmpty(set(a) & set(b))
    for t, classes in enumerate(stream.label_spaces, start=1):
        test.assertContainsSubset(stream.task(t).train.classes, classes)
        test.assertContainsSubset(stream.task(t).test.classes, classes)
    test.assertEmpty(
        set(stream.pretrain.classes) & set(itertools.chain(*stream.label_spaces)))


class SyntheticStreamTest(absltest.TestCase):

    def test_counts(self):
        stream = input_pipeline.make_synthetic_stream(
            seed=1, n_classes=10, classes_per_task=2, d_in=16,
            samples_per_class=50, spread=0.1)
        self.assertEqual(stream.num_tasks, 5)
        self.assertEqual(stream.dim, 16)
        for t in range(1, 6):
            task = stream.task(t)
            self.assertLen(task.classes, 2)
            for c in task.classes:
                self.assertEqual(int(np.sum(task.train.labels == c)), 40)
                self.assertEqual(int(np.sum(task.test.labels == c)), 10)
        self.assertLen(stream.pretrain.classes, 10)
        _assert_disjoint(self, stream)

    def test_deterministic(self):
        kwargs = dict(seed=3, n_classes=4, classes_per_task=2, d_in=5,
                      samples_per_class=10, spread=0.2)
        a = input_pipeline.make_synthetic_stream(**kwargs)
        b = input_pipeline.make_synthetic_stream(**kwargs)
        for t in range(1, a.num_tasks + 1):
            self.assertEqual(a.task(t).train.features.tobytes(),
                             b.task(t).train.features.tobytes())
            self.assertEqual(a.task(t).test.labels.tobytes(),
                             b.task(t).test.labels.tobytes())

    def test_standardized_on_pretraining_split(self):
        stream = input_pipeline.make_synthetic_stream(
            seed=0, n_classes=4, classes_per_task=2, d_in=3,
            samples_per_class=20, spread=0.5)
        features = stream.pretrain.train.features
        np.testing.assert_allclose(features.mean(axis=0), 0., atol=1e-12)
        np.testing.assert_allclose(features.std(axis=0), 1., atol=1e-12)

    def test_zero_spread_rejected(self):
        with self.assertRaises(core.ConfigurationError):
            input_pipeline.make_synthetic_stream(
                seed=1, n_classes=10, classes_per_task=2, d_in=16,
                samples_per_class=50, spread=0.)

    def test_indivisible_rejected(self):
        with self.assertRaises(core.ConfigurationError):
            input_pipeline.make_synthetic_stream(
                seed=1, n_classes=10, classes_per_task=3, d_in=16,
                samples_per_class=50, spread=0.1)


class DatasetTest(absltest.TestCase):

    def test_read_only(self):
        dataset = input_pipeline.Dataset(np.zeros((2, 2)), np.array([0, 1]))
        with self.assertRaises(ValueError):
            dataset.features[0, 0] = 1.

    def test_train_test_split_is_disjoint(self):
        features = np.arange(40, dtype=np.float64).reshape(20, 2)
        labels = np.repeat([0, 1], 10)
        dataset = input_pipeline.Dataset(features, labels)
        train, test = input_pipeline.train_test_split(
            dataset, [0, 1], core.SeededRng(0))
        self.assertLen(train, 16)
        self.assertLen(test, 4)
        train_rows = {tuple(row) for row in train.features}
        test_rows = {tuple(row) for row in test.features}
        self.assertEmpty(train_rows & test_rows)
        self.assertLen(train_rows | test_rows, 20)

    def test_batches_are_near_equal(self):
        dataset = input_pipeline.Dataset(np.zeros((10, 1)), np.zeros(10, np.int64))
        sizes = [len(batch) for batch in dataset.batches(4)]
        self.assertEqual(sizes, [4, 3, 3])

    def test_access_log(self):
        stream = input_pipeline.make_synthetic_stream(
            seed=0, n_classes=4, classes_per_task=2, d_in=3,
            samples_per_class=10, spread=0.5)
        stream.read_train(2, stage=2, purpose="stage2")
        self.assertEqual(stream.access_log,
                         [input_pipeline.DataAccess(stage=2, task=2, purpose="stage2")])
        with self.assertRaises(core.ContractViolationError):
            stream.task(3)


class CsvTest(absltest.TestCase):

    def test_direct_read(self):
        path = self.create_tempfile(content="1.0,2.0,0\n3.0,4.0,1\n5.0,6.0,0\n")
        dataset = input_pipeline.load_csv_dataset(path.full_path, label_column=2)
        self.assertEqual(dataset.dim, 2)
        np.testing.assert_array_equal(dataset.labels, [0, 1, 0])
        np.testing.assert_array_equal(dataset.features[1], [3., 4.])

    def test_header_and_first_column_label(self):
        path = self.create_tempfile(content="y,a\n1,0.5\n0,1.5\n")
        dataset = input_pipeline.load_csv_dataset(
            path.full_path, label_column=0, skip_header=True)
        np.testing.assert_array_equal(dataset.labels, [1, 0])
        np.testing.assert_array_equal(dataset.features[:, 0], [0.5, 1.5])

    def test_empty_file(self):
        path = self.create_tempfile(content="")
        with self.assertRaises(core.DataFormatError):
            input_pipeline.load_csv_dataset(path.full_path, label_column=0)

    def test_non_numeric_names_line(self):
        path = self.create_tempfile(content="1.0,2.0,0\n1.0,abc,1\n")
        with self.assertRaisesRegex(core.DataFormatError, ":2:"):
            input_pipeline.load_csv_dataset(path.full_path, label_column=2)

    def test_missing_file(self):
        missing = os.path.join(self.create_tempdir().full_path, "absent.csv")
        with self.assertRaisesRegex(FileNotFoundError, "absent.csv"):
            input_pipeline.load_csv_dataset(missing, label_column=-1)
        with self.assertRaises(FileNotFoundError):
            input_pipeline.load_idx_dataset(missing + ".gz", missing)

    def test_inconsistent_width(self):
        path = self.create_tempfile(content="1.0,2.0,0\n1.0,1\n")
        with self.assertRaisesRegex(core.DataFormatError, ":2:"):
            input_pipeline.load_csv_dataset(path.full_path, label_column=2)


class IdxTest(parameterized.TestCase):

    def _write(self, name, data, compress=False):
        if compress:
            name += ".gz"
            data = gzip.compress(data)
        path = self.create_tempfile(name)
        with open(path.full_path, "wb") as f:
            f.write(data)
        return path.full_path

    @parameterized.parameters(False, True)
    def test_scaling_and_layout(self, compress):
        pixels = np.array([[[0, 255], [255, 0]], [[255, 255], [0, 0]]])
        images = self._write("images", _idx_images(pixels), compress)
        labels = self._write("labels", _idx_labels([3, 7]), compress)
        dataset = input_pipeline.load_idx_dataset(images, labels)
        self.assertEqual(dataset.features.shape, (2, 4))
        np.testing.assert_array_equal(dataset.features[0], [0., 1., 1., 0.])
        np.testing.assert_array_equal(dataset.labels, [3, 7])

    def test_header_bytes(self):
        header = bytes.fromhex("00000803" "00000002" "00000002" "00000002")
        images = self._write("images", header + bytes(8))
        labels = self._write("labels", _idx_labels([0, 1]))
        dataset = input_pipeline.load_idx_dataset(images, labels)
        self.assertLen(dataset, 2)
        self.assertEqual(dataset.dim, 4)

    def test_count_mismatch(self):
        images = self._write("images", _idx_images(np.zeros((2, 2, 2))))
        labels = self._write("labels", _idx_labels([0]))
        with self.assertRaises(core.DataFormatError):
            input_pipeline.load_idx_dataset(images, labels)

    def test_bad_magic(self):
        images = self._write("images", _idx_labels(list(range(10))))
        labels = self._write("labels", _idx_labels([0, 1]))
        with self.assertRaisesRegex(core.DataFormatError, "magic"):
            input_pipeline.load_idx_dataset(images, labels)

    def test_truncated(self):
        images = self._write("images", _idx_images(np.zeros((2, 2, 2)))[:-1])
        labels = self._write("labels", _idx_labels([0, 1]))
        with self.assertRaisesRegex(core.DataFormatError, "truncated"):
            input_pipeline.load_idx_dataset(images, labels)


class SplitIntoTasksTest(absltest.TestCase):

    def _dataset(self, n_classes, per_class=10, dim=3):
        rng = core.SeededRng(0)
        return input_pipeline.Dataset(
            rng.normal((n_classes * per_class, dim)),
            np.repeat(np.arange(n_classes), per_class))

    def test_counts_with_pretraining(self):
        stream = input_pipeline.split_into_tasks(
            self._dataset(12), classes_per_task=5, seed=0, pretrain_fraction=1 / 6)
        self.assertEqual(stream.num_tasks, 2)
        self.assertLen(stream.pretrain.classes, 2)
        for classes in stream.label_spaces:
            self.assertLen(classes, 5)
        _assert_disjoint(self, stream)

    def test_seed_changes_assignment(self):
        dataset = self._dataset(12)
        a = input_pipeline.split_into_tasks(dataset, 3, seed=0)
        b = input_pipeline.split_into_tasks(dataset, 3, seed=1)
        self.assertNotEqual(a.label_spaces, b.label_spaces)
        self.assertEqual([len(c) for c in a.label_spaces],
                         [len(c) for c in b.label_spaces])

    def test_indivisible(self):
        with self.assertRaises(core.ConfigurationError):
            input_pipeline.split_into_tasks(
                self._dataset(12), classes_per_task=7, seed=0, pretrain_fraction=1 / 6)

    def test_held_out_test_set(self):
        dataset = self._dataset(4)
        test_dataset = self._dataset(4, per_class=3)
        stream = input_pipeline.split_into_tasks(
            dataset, 2, seed=0, test_dataset=test_dataset)
        self.assertLen(stream.task(1).train, 20)
        self.assertLen(stream.task(1).test, 6)


if __name__ == "__main__":
    absltest.main()
