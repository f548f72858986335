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
"""Generate evaluation metrics for each task."""

from typing import Dict, List, Optional, Sequence, Tuple

import jax.numpy as jnp
import numpy as np

from libml import core
from libml import input_pipeline
from libml import losses
from models import backbone as backbone_lib


class AccuracyMatrix:
    """Lower-triangular record A[t][i] of accuracy on task i after task t.

    Stages and tasks are 1-indexed. Entries above the diagonal are NaN.
    """

    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise core.ContractViolationError("An accuracy matrix needs a task.")
        self._values = np.full((num_tasks, num_tasks), np.nan)
        self._filled = np.zeros((num_tasks, num_tasks), dtype=bool)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        """Builds a matrix whose row t holds exactly t accuracies."""
        matrix = cls(len(rows))
        for t, row in enumerate(rows, start=1):
            if len(row) != t:
                raise core.ContractViolationError(
                    f"Row {t} holds {len(row)} entries; expected {t}.")
            for i, value in enumerate(row, start=1):
                matrix.set(t, i, value)
        return matrix

    @property
    def size(self) -> int:
        return self._values.shape[0]

    @property
    def num_stages(self) -> int:
        """Number of leading rows that are completely filled."""
        stages = 0
        for t in range(1, self.size + 1):
            if not self._filled[t - 1, :t].all():
                break
            stages = t
        return stages

    def set(self, t: int, i: int, value: float):
        if not 1 <= i <= t <= self.size:
            raise core.ContractViolationError(
                f"Entry ({t}, {i}) lies outside the lower triangle of a "
                f"{self.size}x{self.size} matrix.")
        self._values[t - 1, i - 1] = float(value)
        self._filled[t - 1, i - 1] = True

    def get(self, t: int, i: int) -> float:
        if not (1 <= i <= t <= self.size and self._filled[t - 1, i - 1]):
            raise core.ContractViolationError(f"Entry ({t}, {i}) is undefined.")
        return float(self._values[t - 1, i - 1])

    def row(self, t: int) -> np.ndarray:
        return self._values[t - 1, :t].copy()

    def to_numpy(self) -> np.ndarray:
        return self._values.copy()

    def entries(self) -> List[Tuple[int, int, float]]:
        return [(t, i, self.get(t, i))
                for t in range(1, self.num_stages + 1)
                for i in range(1, t + 1)]


def _checked_stages(matrix: AccuracyMatrix) -> int:
    stages = matrix.num_stages
    for t in range(stages + 1, matrix.size + 1):
        if matrix._filled[t - 1].any():  # pylint: disable=protected-access
            raise core.ContractViolationError(
                f"Row {t} is filled while an earlier row is incomplete.")
    if not stages:
        raise core.ContractViolationError("The accuracy matrix has no complete row.")
    return stages


def stage_accuracy(matrix: AccuracyMatrix, t: int) -> float:
    """ACC_t: mean accuracy over the test sets of tasks 1..t after task t."""
    return float(np.mean(matrix.row(t)))


def per_stage_accuracy(matrix: AccuracyMatrix) -> List[float]:
    return [stage_accuracy(matrix, t) for t in range(1, _checked_stages(matrix) + 1)]


def final_accuracy(matrix: AccuracyMatrix) -> float:
    return per_stage_accuracy(matrix)[-1]


def average_accuracy(matrix: AccuracyMatrix) -> float:
    """(1/T) sum_t ACC_t over the filled stages."""
    accuracies = per_stage_accuracy(matrix)
    return float(sum(accuracies) / len(accuracies))


def backward_transfer(matrix: AccuracyMatrix) -> Optional[float]:
    """(1/(T-1)) sum_{i<T} (A[T][i] - A[i][i]); None for a single task."""
    stages = _checked_stages(matrix)
    if stages < 2:
        return None
    changes = [matrix.get(stages, i) - matrix.get(i, i) for i in range(1, stages)]
    return float(sum(changes) / (stages - 1))


def forgetting(matrix: AccuracyMatrix) -> Optional[float]:
    """Mean over old tasks of the best earlier accuracy minus the final one."""
    stages = _checked_stages(matrix)
    if stages < 2:
        return None
    drops = [
        max(matrix.get(t, i) for t in range(i, stages)) - matrix.get(stages, i)
        for i in range(1, stages)
    ]
    return float(sum(drops) / (stages - 1))


def learning_accuracy(matrix: AccuracyMatrix) -> float:
    """Mean of the diagonal: new-class accuracy right after each task."""
    stages = _checked_stages(matrix)
    return float(sum(matrix.get(t, t) for t in range(1, stages + 1)) / stages)


def old_new_accuracy(
        matrix: AccuracyMatrix) -> Tuple[List[Optional[float]], List[float]]:
    """Per stage, mean accuracy on the old tasks (None at t=1) and on the new one."""
    stages = _checked_stages(matrix)
    old, new = [], []
    for t in range(1, stages + 1):
        row = matrix.row(t)
        old.append(float(np.mean(row[:-1])) if t > 1 else None)
        new.append(float(row[-1]))
    return old, new


def predict(backbone: backbone_lib.Backbone, head: backbone_lib.Head,
            features, through_task: int) -> np.ndarray:
    """Class ids of the argmax over all seen classes; ties go to the lowest id."""
    trace = backbone_lib.forward(backbone, head, features, through_task)
    order = np.argsort(np.asarray(head.class_ids), kind="stable")
    logits = np.asarray(trace.logits)[:, order]
    return np.asarray(head.class_ids, dtype=np.int64)[order][np.argmax(logits, axis=1)]


def task_accuracy(backbone: backbone_lib.Backbone, head: backbone_lib.Head,
                  test_set: input_pipeline.Dataset, through_task: int) -> float:
    """Percentage of `test_set` classified correctly by the model after a task."""
    if not len(test_set):
        raise core.DegenerateInputError("Cannot evaluate on an empty test set.")
    predictions = predict(backbone, head, test_set.features, through_task)
    correct = int(np.count_nonzero(predictions == test_set.labels))
    return 100. * correct / len(test_set)


def class_centers(backbone: backbone_lib.Backbone, dataset: input_pipeline.Dataset,
                  classes: Sequence[int], through_task: int) -> Dict[int, np.ndarray]:
    """Mean embedding of every class, each class embedded in a single pass."""
    centers = {}
    for c in classes:
        subset = dataset.select_classes([c])
        if not len(subset):
            raise core.DegenerateInputError(f"Class {c} has no samples.")
        embeddings = backbone_lib.embed(backbone, subset.features, through_task)
        centers[int(c)] = np.asarray(jnp.mean(embeddings, axis=0))
    return centers


def measure_drift(backbone: backbone_lib.Backbone, t: int,
                  task1_train: input_pipeline.Dataset,
                  prototypes: losses.PrototypeStore,
                  classes: Optional[Sequence[int]] = None) -> float:
    """Mean squared distance between task-1 class centers at task t and their prototypes.

    Reads task-1 training data for measurement only.
    """
    if t < 1:
        raise core.ContractViolationError(f"Drift is defined from task 1, got t={t}.")
    classes = task1_train.classes if classes is None else tuple(classes)
    if not classes:
        raise core.DegenerateInputError("Task 1 has no classes to measure.")
    references = {c: prototypes.get(c) for c in classes}
    centers = class_centers(backbone, task1_train, classes, t)
    shifts = [float(np.sum((centers[c] - references[c]) ** 2)) for c in classes]
    return float(sum(shifts) / len(shifts))


def drift_curve(backbone: backbone_lib.Backbone,
                task1_train: input_pipeline.Dataset,
                classes: Sequence[int]) -> List[float]:
    """Drift at every learned task, recomputed from the stored adapters.

    The task-1 prototypes are rebuilt from the first adapter, exactly as the
    training loop computed them.
    """
    prototypes = losses.PrototypeStore(backbone.embed_dim)
    for class_id, center in class_centers(backbone, task1_train, classes, 1).items():
        prototypes.add(class_id, center, 1)
    return [measure_drift(backbone, t, task1_train, prototypes, classes)
            for t in range(1, backbone.num_tasks + 1)]
