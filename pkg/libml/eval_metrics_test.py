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
"""Tests for libml.eval_metrics."""

from absl.testing import absltest
import jax.numpy as jnp
import numpy as np

from libml import core
from libml import eval_metrics
from libml import input_pipeline
from libml import losses
from models import backbone as backbone_lib


def _identity_backbone(num_adapters=1):
    spec = backbone_lib.LayerSpec("layer_0", "linear", 2, 2, "identity")
    zero = {"layer_0": {"delta": jnp.zeros((2, 2))}}
    return backbone_lib.Backbone(
        frozen={"layer_0": {"kernel": jnp.eye(2), "bias": jnp.zeros((2,))}},
        adapters=(zero,) * num_adapters,
        kind=backbone_lib.MLP,
        specs=(spec,),
        adapter_mode=backbone_lib.FULL,
        rank=1)


class AccuracyMatrixTest(absltest.TestCase):

    def test_average_accuracy(self):
        matrix = eval_metrics.AccuracyMatrix.from_rows(
            [[100.], [90., 90.], [80., 80., 80.]])
        self.assertEqual(eval_metrics.per_stage_accuracy(matrix), [100., 90., 80.])
        self.assertEqual(eval_metrics.average_accuracy(matrix), 90.)
        self.assertEqual(eval_metrics.final_accuracy(matrix), 80.)

    def test_single_task(self):
        matrix = eval_metrics.AccuracyMatrix.from_rows([[73.5]])
        self.assertEqual(eval_metrics.average_accuracy(matrix), 73.5)
        self.assertIsNone(eval_metrics.backward_transfer(matrix))
        self.assertIsNone(eval_metrics.forgetting(matrix))

    def test_backward_transfer(self):
        matrix = eval_metrics.AccuracyMatrix.from_rows([[90.], [80., 85.]])
        self.assertEqual(eval_metrics.backward_transfer(matrix), -10.)
        matrix = eval_metrics.AccuracyMatrix.from_rows(
            [[90.], [88., 85.], [84., 83., 70.]])
        self.assertEqual(eval_metrics.backward_transfer(matrix), -4.)
        matrix = eval_metrics.AccuracyMatrix.from_rows([[90.], [50., 85.], [90., 85., 1.]])
        self.assertEqual(eval_metrics.backward_transfer(matrix), 0.)

    def test_forgetting_and_learning(self):
        matrix = eval_metrics.AccuracyMatrix.from_rows(
            [[90.], [95., 80.], [70., 60., 50.]])
        # Best earlier accuracies are 95 and 80.
        self.assertEqual(eval_metrics.forgetting(matrix), ((95. - 70.) + (80. - 60.)) / 2)
        self.assertEqual(eval_metrics.learning_accuracy(matrix), (90. + 80. + 50.) / 3)
        old, new = eval_metrics.old_new_accuracy(matrix)
        self.assertEqual(old, [None, 95., 65.])
        self.assertEqual(new, [90., 80., 50.])

    def test_matches_spreadsheet_formulas(self):
        rng = core.SeededRng(0)
        size = 5
        values = 100. * rng.uniform((size, size))
        matrix = eval_metrics.AccuracyMatrix.from_rows(
            [list(values[t, :t + 1]) for t in range(size)])
        stage = [sum(values[t, :t + 1]) / (t + 1) for t in range(size)]
        self.assertAlmostEqual(eval_metrics.average_accuracy(matrix),
                               sum(stage) / size, delta=1e-12)
        bwt = sum(values[size - 1, i] - values[i, i] for i in range(size - 1)) / (size - 1)
        self.assertAlmostEqual(eval_metrics.backward_transfer(matrix), bwt, delta=1e-12)

    def test_contract(self):
        with self.assertRaises(core.ContractViolationError):
            eval_metrics.AccuracyMatrix.from_rows([[1.], [1.]])
        matrix = eval_metrics.AccuracyMatrix(3)
        with self.assertRaises(core.ContractViolationError):
            matrix.set(1, 2, 50.)
        with self.assertRaises(core.ContractViolationError):
            eval_metrics.average_accuracy(matrix)
        matrix.set(1, 1, 50.)
        matrix.set(2, 1, 40.)
        self.assertEqual(matrix.num_stages, 1)
        self.assertEqual(matrix.entries(), [(1, 1, 50.)])


class TaskAccuracyTest(absltest.TestCase):

    def _head(self, classes, kernel=None):
        head = backbone_lib.grow_head(backbone_lib.init_head(2), classes, 1)
        if kernel is not None:
            head = backbone_lib.replace_task_rows(
                head, 1, {"kernel": jnp.asarray(kernel), "bias": jnp.zeros(len(classes))})
        return head

    def test_all_correct(self):
        head = self._head([0, 1], np.eye(2))
        test_set = input_pipeline.Dataset([[1., 0.], [0., 2.]], [0, 1])
        self.assertEqual(
            eval_metrics.task_accuracy(_identity_backbone(), head, test_set, 1), 100.)

    def test_zero_head_predicts_lowest_class(self):
        head = self._head([3, 1])
        test_set = input_pipeline.Dataset(
            [[1., 0.], [0., 1.], [2., 2.], [5., 1.]], [1, 1, 3, 3])
        self.assertEqual(
            eval_metrics.task_accuracy(_identity_backbone(), head, test_set, 1), 50.)

    def test_matches_per_sample_loop(self):
        rng = core.SeededRng(1)
        head = self._head([0, 1], rng.normal((2, 2)))
        test_set = input_pipeline.Dataset(rng.normal((25, 2)),
                                          np.arange(25) % 2)
        correct = 0
        for features, label in zip(test_set.features, test_set.labels):
            logits = np.asarray(head.kernel) @ features
            correct += int(int(np.argmax(logits)) == label)
        self.assertEqual(
            eval_metrics.task_accuracy(_identity_backbone(), head, test_set, 1),
            100. * correct / 25)

    def test_empty(self):
        with self.assertRaises(core.DegenerateInputError):
            eval_metrics.task_accuracy(
                _identity_backbone(), self._head([0]),
                input_pipeline.Dataset(np.zeros((0, 2)), np.zeros(0)), 1)


class DriftTest(absltest.TestCase):

    def test_class_center(self):
        dataset = input_pipeline.Dataset([[0., 2.], [2., 0.], [9., 9.]], [0, 0, 1])
        centers = eval_metrics.class_centers(_identity_backbone(), dataset, [0], 1)
        np.testing.assert_array_equal(centers[0], [1., 1.])
        with self.assertRaises(core.DegenerateInputError):
            eval_metrics.class_centers(_identity_backbone(), dataset, [2], 1)

    def test_hand_built_shift(self):
        prototypes = losses.PrototypeStore(2)
        prototypes.add(0, [0., 0.], task=1)
        dataset = input_pipeline.Dataset([[1., 1.], [1., 1.]], [0, 0])
        self.assertEqual(
            eval_metrics.measure_drift(_identity_backbone(), 1, dataset, prototypes), 2.)

    def test_missing_prototype(self):
        dataset = input_pipeline.Dataset([[1., 1.]], [4])
        with self.assertRaises(core.ContractViolationError):
            eval_metrics.measure_drift(_identity_backbone(), 1, dataset,
                                       losses.PrototypeStore(2))

    def test_unchanged_model_has_no_drift(self):
        dataset = input_pipeline.Dataset(core.SeededRng(2).normal((6, 2)),
                                         [0, 0, 0, 1, 1, 1])
        curve = eval_metrics.drift_curve(_identity_backbone(3), dataset, [0, 1])
        self.assertEqual(curve, [0., 0., 0.])

    def test_drift_follows_adapters(self):
        backbone = _identity_backbone(1)
        shift = {"layer_0": {"delta": jnp.eye(2)}}
        backbone = backbone.replace(adapters=backbone.adapters + (shift,))
        dataset = input_pipeline.Dataset([[1., 0.], [1., 0.]], [0, 0])
        curve = eval_metrics.drift_curve(backbone, dataset, [0])
        # The second adapter doubles every embedding: [1, 0] -> [2, 0].
        self.assertEqual(curve, [0., 1.])


if __name__ == "__main__":
    absltest.main()
