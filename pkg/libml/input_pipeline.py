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
"""Deterministic input pipeline producing class-incremental task streams.

A stream holds T tasks with disjoint label spaces plus a pretraining split over
classes disjoint from every task. Features are standardized with statistics of
the pretraining split only, so no statistic of a continual task ever leaks into
training.
"""

import csv
import dataclasses
import gzip
import io
import math
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

from absl import logging
import ml_collections
import numpy as np
import tensorflow as tf

from libml import core

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
TRAIN_FRACTION = 0.8


class Sample(NamedTuple):
    features: np.ndarray
    label: int


@dataclasses.dataclass(frozen=True)
class Dataset:
    """Immutable features [n, d_in] (float64) and labels [n] (int64)."""
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if features.ndim != 2 or labels.ndim != 1:
            raise core.ContractViolationError(
                f"Expected features [n, d] and labels [n], got {features.shape} "
                f"and {labels.shape}.")
        if features.shape[0] != labels.shape[0]:
            raise core.ContractViolationError(
                f"{features.shape[0]} feature rows but {labels.shape[0]} labels.")
        if not np.all(np.isfinite(features)):
            raise core.ContractViolationError("Feature entries must be finite.")
        if labels.size and labels.min() < 0:
            raise core.ContractViolationError("Labels must be non-negative.")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, index: int) -> Sample:
        return Sample(self.features[index], int(self.labels[index]))

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def classes(self) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.labels))

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices])

    def select_classes(self, classes: Sequence[int]) -> "Dataset":
        return self.subset(np.flatnonzero(np.isin(self.labels, list(classes))))

    def batches(self, batch_size: int,
                order: Optional[np.ndarray] = None) -> Iterator["Dataset"]:
        """Yields ceil(n / batch_size) near-equal batches following `order`.

        Splitting into near-equal chunks keeps every batch at least two samples
        wide whenever n >= 2 * number of batches, which the triplet loss needs.
        """
        if not len(self):
            return
        order = np.arange(len(self)) if order is None else np.asarray(order)
        num_batches = max(1, math.ceil(len(self) / batch_size))
        for chunk in np.array_split(order, num_batches):
            yield self.subset(chunk)


@dataclasses.dataclass(frozen=True)
class TaskSplit:
    classes: Tuple[int, ...]
    train: Dataset
    test: Dataset


class DataAccess(NamedTuple):
    stage: int
    task: int
    purpose: str


@dataclasses.dataclass(frozen=True)
class TaskStream:
    """T sequential tasks with disjoint label spaces and a pretraining split.

    Tasks are indexed from 1 as in the training loop. Training code reads task
    data through `read_train`, which appends to `access_log`; the log is what
    proves that task t never reads older tasks while it trains.
    """
    tasks: Tuple[TaskSplit, ...]
    pretrain: TaskSplit
    access_log: List[DataAccess] = dataclasses.field(
        default_factory=list, compare=False)

    def __post_init__(self):
        seen = set()
        for index, task in enumerate(self.tasks, start=1):
            overlap = seen.intersection(task.classes)
            if overlap:
                raise core.ContractViolationError(
                    f"Task {index} reuses classes {sorted(overlap)}.")
            seen.update(task.classes)
            for split_name, split in (("train", task.train), ("test", task.test)):
                stray = set(split.classes) - set(task.classes)
                if stray:
                    raise core.ContractViolationError(
                        f"Task {index} {split_name} split holds foreign labels "
                        f"{sorted(stray)}.")
        shared = seen.intersection(self.pretrain.classes)
        if shared:
            raise core.ContractViolationError(
                f"Pretraining classes {sorted(shared)} overlap the task stream.")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def label_spaces(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(task.classes for task in self.tasks)

    @property
    def dim(self) -> int:
        return self.pretrain.train.dim

    @property
    def num_classes(self) -> int:
        return sum(len(task.classes) for task in self.tasks)

    def task(self, t: int) -> TaskSplit:
        if not 1 <= t <= self.num_tasks:
            raise core.ContractViolationError(
                f"Task index {t} outside 1..{self.num_tasks}.")
        return self.tasks[t - 1]

    def read_train(self, t: int, *, stage: int, purpose: str) -> Dataset:
        """Returns task t's training set and records who asked for it."""
        self.access_log.append(DataAccess(stage=stage, task=t, purpose=purpose))
        return self.task(t).train

    def test_set(self, t: int) -> Dataset:
        return self.task(t).test


def _concat(datasets: Sequence[Dataset], dim: int) -> Dataset:
    if not datasets:
        return Dataset(np.zeros((0, dim)), np.zeros((0,), np.int64))
    return Dataset(
        np.concatenate([d.features for d in datasets], axis=0),
        np.concatenate([d.labels for d in datasets], axis=0))


def train_test_split(dataset: Dataset, classes: Sequence[int],
                     rng: core.SeededRng,
                     train_fraction: float = TRAIN_FRACTION
                     ) -> Tuple[Dataset, Dataset]:
    """Seeded per-class split; each class keeps round(train_fraction * n) rows."""
    train, test = [], []
    for c in classes:
        indices = np.flatnonzero(dataset.labels == c)
        indices = indices[rng.permutation(indices.size)]
        n_train = int(math.floor(train_fraction * indices.size + 0.5))
        train.append(dataset.subset(np.sort(indices[:n_train])))
        test.append(dataset.subset(np.sort(indices[n_train:])))
    return _concat(train, dataset.dim), _concat(test, dataset.dim)


def standardize(stream: TaskStream) -> TaskStream:
    """Standardizes features with the pretraining training split's statistics."""
    reference = stream.pretrain.train.features
    mean = reference.mean(axis=0)
    std = reference.std(axis=0)
    std = np.where(std > 0., std, 1.)

    def apply(dataset: Dataset) -> Dataset:
        return Dataset((dataset.features - mean) / std, dataset.labels)

    def apply_split(split: TaskSplit) -> TaskSplit:
        return TaskSplit(split.classes, apply(split.train), apply(split.test))

    return TaskStream(
        tasks=tuple(apply_split(task) for task in stream.tasks),
        pretrain=apply_split(stream.pretrain))


def make_synthetic_stream(seed: int,
                          n_classes: int,
                          classes_per_task: int,
                          d_in: int,
                          samples_per_class: int,
                          spread: float,
                          train_fraction: float = TRAIN_FRACTION) -> TaskStream:
    """Gaussian clusters with means on the unit sphere.

    Classes 0..n_classes-1 form the task stream, in order, `classes_per_task` at
    a time. Classes n_classes..2*n_classes-1 form the pretraining split.

    Args:
      seed: Master seed of the generator.
      n_classes: Number of continual classes.
      classes_per_task: Classes per task; must divide `n_classes`.
      d_in: Feature dimension.
      samples_per_class: Samples drawn per class before the train/test split.
      spread: Standard deviation of every cluster; must be positive.
      train_fraction: Share of every class kept for training.

    Returns:
      The standardized task stream.
    """
    if classes_per_task < 1 or n_classes % classes_per_task:
        raise core.ConfigurationError(
            f"n_classes={n_classes} is not divisible by "
            f"classes_per_task={classes_per_task}.")
    if not spread > 0.:
        raise core.ConfigurationError(f"spread must be positive, got {spread}.")
    if d_in < 1 or samples_per_class < 2:
        raise core.ConfigurationError(
            "d_in must be positive and samples_per_class at least 2.")

    rng = core.SeededRng(seed).fork("data/synthetic")
    total = 2 * n_classes
    means = np.array(rng.normal((total, d_in)))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    noise = rng.normal((total, samples_per_class, d_in))
    features = (means[:, np.newaxis, :] + spread * noise).reshape(-1, d_in)
    labels = np.repeat(np.arange(total), samples_per_class)
    dataset = Dataset(features, labels)

    split_rng = rng.fork("split")

    def make_split(classes):
        train, test = train_test_split(dataset, classes, split_rng, train_fraction)
        return TaskSplit(tuple(classes), train, test)

    tasks = tuple(
        make_split(list(range(start, start + classes_per_task)))
        for start in range(0, n_classes, classes_per_task))
    pretrain = make_split(list(range(n_classes, total)))
    logging.info("Synthetic stream: %d tasks x %d classes, d_in=%d, spread=%g.",
                 len(tasks), classes_per_task, d_in, spread)
    return standardize(TaskStream(tasks=tasks, pretrain=pretrain))


def load_csv_dataset(path: str, label_column: int,
                     skip_header: bool = False) -> Dataset:
    """Reads a comma-separated numeric file with one integral label column."""
    with _open_existing(path, "r") as f:
        text = f.read()
    rows, labels, width = [], [], None
    for line_number, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if skip_header and line_number == 1:
            continue
        if not row or all(not token.strip() for token in row):
            continue
        if width is None:
            width = len(row)
            if not -width <= label_column < width:
                raise core.DataFormatError(
                    f"{path}:{line_number}: label column {label_column} outside a "
                    f"row of {width} columns.")
        elif len(row) != width:
            raise core.DataFormatError(
                f"{path}:{line_number}: expected {width} columns, got {len(row)}.")
        try:
            values = [float(token) for token in row]
        except ValueError as e:
            raise core.DataFormatError(
                f"{path}:{line_number}: non-numeric token ({e}).") from e
        label = values.pop(label_column % width)
        if not math.isfinite(label) or label != int(label) or label < 0:
            raise core.DataFormatError(
                f"{path}:{line_number}: label {label!r} is not a class id.")
        if not all(math.isfinite(v) for v in values):
            raise core.DataFormatError(f"{path}:{line_number}: non-finite feature.")
        rows.append(values)
        labels.append(int(label))
    if not rows:
        raise core.DataFormatError(f"{path}: no data rows.")
    if width < 2:
        raise core.DataFormatError(f"{path}: rows need a feature and a label.")
    return Dataset(np.asarray(rows, np.float64), np.asarray(labels, np.int64))


def _open_existing(path: str, mode: str):
    if not tf.io.gfile.exists(path):
        raise FileNotFoundError(f"{path}: no such file.")
    return tf.io.gfile.GFile(path, mode)


def _read_bytes(path: str) -> bytes:
    with _open_existing(path, "rb") as f:
        data = f.read()
    if path.endswith(".gz"):
        data = gzip.decompress(data)
    return data


def _idx_header(data: bytes, magic: int, ndim: int, path: str) -> np.ndarray:
    header_size = 4 * (1 + ndim)
    if len(data) < header_size:
        raise core.DataFormatError(f"{path}: truncated IDX header.")
    header = np.frombuffer(data, dtype=">u4", count=1 + ndim)
    if int(header[0]) != magic:
        raise core.DataFormatError(
            f"{path}: magic 0x{int(header[0]):08x}, expected 0x{magic:08x}.")
    dims = header[1:].astype(np.int64)
    if len(data) - header_size < int(np.prod(dims)):
        raise core.DataFormatError(f"{path}: truncated IDX payload.")
    return dims


def load_idx_dataset(images_path: str, labels_path: str) -> Dataset:
    """Reads big-endian IDX3 images and IDX1 labels; pixels scaled to [0, 1]."""
    image_bytes = _read_bytes(images_path)
    label_bytes = _read_bytes(labels_path)
    count, rows, cols = _idx_header(image_bytes, IDX_IMAGES_MAGIC, 3, images_path)
    (label_count,) = _idx_header(label_bytes, IDX_LABELS_MAGIC, 1, labels_path)
    if count != label_count:
        raise core.DataFormatError(
            f"{images_path} holds {count} images but {labels_path} holds "
            f"{label_count} labels.")
    pixels = np.frombuffer(image_bytes, dtype=np.uint8, offset=16,
                           count=count * rows * cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8, offset=8, count=count)
    features = pixels.reshape(count, rows * cols).astype(np.float64) / 255.
    return Dataset(features, labels.astype(np.int64))


def split_into_tasks(dataset: Dataset,
                     classes_per_task: int,
                     seed: int,
                     pretrain_fraction: float = 0.,
                     test_dataset: Optional[Dataset] = None,
                     train_fraction: float = TRAIN_FRACTION) -> TaskStream:
    """Splits a labelled dataset into a seeded class-incremental stream.

    The class ids are shuffled with `seed`; the first
    round(pretrain_fraction * n_classes) become the pretraining split and the
    rest are dealt out `classes_per_task` at a time.

    Args:
      dataset: The whole labelled dataset.
      classes_per_task: Classes per task.
      seed: Seed of the class shuffle and of the per-class train/test split.
      pretrain_fraction: Fraction of the classes reserved for pretraining.
      test_dataset: Optional held-out test set; when given, no train/test split
        of `dataset` is made.
      train_fraction: Share of every class kept for training.

    Returns:
      The standardized task stream.
    """
    if not 0. <= pretrain_fraction < 1.:
        raise core.ConfigurationError(
            f"pretrain_fraction must lie in [0, 1), got {pretrain_fraction}.")
    classes = np.asarray(dataset.classes, dtype=np.int64)
    rng = core.SeededRng(seed).fork("data/split_into_tasks")
    classes = classes[rng.permutation(classes.size)]
    n_pretrain = int(math.floor(pretrain_fraction * classes.size + 0.5))
    remaining = classes[n_pretrain:]
    if classes_per_task < 1 or remaining.size == 0 or remaining.size % classes_per_task:
        raise core.ConfigurationError(
            f"{remaining.size} continual classes are not divisible by "
            f"classes_per_task={classes_per_task}.")

    split_rng = rng.fork("split")

    def make_split(split_classes):
        split_classes = tuple(int(c) for c in split_classes)
        if test_dataset is None:
            train, test = train_test_split(dataset, split_classes, split_rng,
                                           train_fraction)
        else:
            train = dataset.select_classes(split_classes)
            test = test_dataset.select_classes(split_classes)
        return TaskSplit(split_classes, train, test)

    tasks = tuple(
        make_split(remaining[start:start + classes_per_task])
        for start in range(0, remaining.size, classes_per_task))
    pretrain = make_split(classes[:n_pretrain])
    logging.info("Split %d classes into %d tasks (%d pretraining classes).",
                 classes.size, len(tasks), n_pretrain)
    stream = TaskStream(tasks=tasks, pretrain=pretrain)
    if n_pretrain:
        stream = standardize(stream)
    return stream


def create_task_stream(config: ml_collections.ConfigDict, seed: int) -> TaskStream:
    """Builds the task stream named by `config.data`."""
    data = config.data
    if data.source == "synthetic":
        return make_synthetic_stream(
            seed=seed,
            n_classes=data.n_classes,
            classes_per_task=data.classes_per_task,
            d_in=data.d_in,
            samples_per_class=data.samples_per_class,
            spread=data.spread,
            train_fraction=data.train_fraction)
    if data.source == "csv":
        dataset = load_csv_dataset(data.csv_path, data.label_column,
                                   data.skip_header)
        test_dataset = (
            load_csv_dataset(data.csv_test_path, data.label_column,
                             data.skip_header) if data.csv_test_path else None)
    elif data.source == "idx":
        dataset = load_idx_dataset(data.train_images, data.train_labels)
        test_dataset = (
            load_idx_dataset(data.test_images, data.test_labels)
            if data.test_images else None)
    else:
        raise core.ConfigurationError(f"Unknown data source {data.source!r}.")
    return split_into_tasks(
        dataset,
        classes_per_task=data.classes_per_task,
        seed=seed,
        pretrain_fraction=data.pretrain_fraction,
        test_dataset=test_dataset,
        train_fraction=data.train_fraction)
