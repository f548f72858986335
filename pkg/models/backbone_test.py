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
"""Tests for models.backbone."""

from absl.testing import absltest
from absl.testing import parameterized
import jax
from jax.flatten_util import ravel_pytree
import jax.numpy as jnp
import numpy as np

from libml import core
from models import backbone as backbone_lib


def _identity_backbone():
    """One 2x2 identity map with a single rank-1 adapter."""
    spec = backbone_lib.LayerSpec("layer_0", "linear", 2, 2, "identity")
    return backbone_lib.Backbone(
        frozen={"layer_0": {"kernel": jnp.eye(2), "bias": jnp.zeros((2,))}},
        adapters=({"layer_0": {"A": jnp.array([[0., 1.]]),
                               "B": jnp.array([[1.], [0.]])}},),
        kind=backbone_lib.MLP,
        specs=(spec,),
        adapter_mode=backbone_lib.FACTORED,
        rank=1)


def _trained_model(kind, adapter_mode, seed=0):
    """Two tasks; the adapter and head rows of task 2 are random."""
    rng = core.SeededRng(seed)
    backbone = backbone_lib.init_backbone(
        rng, kind=kind, d_in=4, hidden_dim=5, embed_dim=3, num_layers=2,
        adapter_mode=adapter_mode, rank=2, num_tokens=2)
    head = backbone_lib.init_head(backbone.embed_dim)
    for t, classes in ((1, (0, 1)), (2, (2, 3))):
        backbone = backbone_lib.expand_adapter(backbone, rng)
        head = backbone_lib.grow_head(head, classes, t)
    flat, unravel = ravel_pytree(backbone_lib.training_params(backbone, head))
    params = unravel(jnp.asarray(0.5 * rng.normal(flat.shape)))
    backbone = backbone_lib.replace_last_adapter(backbone, params["adapter"])
    head = backbone_lib.replace_task_rows(head, 2, params["head"])
    return backbone, head, rng


_KINDS_AND_MODES = (
    ("mlp_factored", backbone_lib.MLP, backbone_lib.FACTORED),
    ("mlp_full", backbone_lib.MLP, backbone_lib.FULL),
    ("attention_factored", backbone_lib.ATTENTION, backbone_lib.FACTORED),
    ("attention_full", backbone_lib.ATTENTION, backbone_lib.FULL),
)


class EffectiveWeightTest(absltest.TestCase):

    def test_adds_adapter(self):
        backbone = _identity_backbone()
        np.testing.assert_array_equal(
            backbone_lib.effective_weight(backbone, "layer_0", 0), np.eye(2))
        np.testing.assert_array_equal(
            backbone_lib.effective_weight(backbone, "layer_0", 1),
            [[1., 1.], [0., 1.]])
        np.testing.assert_array_equal(
            backbone_lib.adapter_sum(backbone, "layer_0", 1), [[0., 1.], [0., 0.]])

    def test_out_of_range(self):
        backbone = _identity_backbone()
        with self.assertRaises(core.ContractViolationError):
            backbone_lib.effective_weight(backbone, "layer_0", 2)
        with self.assertRaises(core.ContractViolationError):
            backbone_lib.effective_weight(backbone, "layer_9", 1)


class ForwardTest(parameterized.TestCase):

    def test_identity_example(self):
        backbone = _identity_backbone()
        head = backbone_lib.grow_head(backbone_lib.init_head(2), [5, 6], 1)
        head = backbone_lib.replace_task_rows(
            head, 1, {"kernel": jnp.eye(2), "bias": jnp.zeros((2,))})
        trace = backbone_lib.forward(backbone, head, [[1., 2.]], 0, capture=True)
        np.testing.assert_array_equal(trace.embedding, [[1., 2.]])
        np.testing.assert_array_equal(trace.logits, [[1., 2.]])
        np.testing.assert_array_equal(trace.inputs["layer_0"], [[1., 2.]])
        trace = backbone_lib.forward(backbone, head, [[1., 2.]], 1)
        np.testing.assert_array_equal(trace.embedding, [[3., 2.]])
        self.assertEqual(trace.inputs, {})

    def test_default_mlp_layout(self):
        rng = core.SeededRng(4)
        backbone = backbone_lib.init_backbone(
            rng, kind=backbone_lib.MLP, d_in=16, hidden_dim=64, embed_dim=64,
            num_layers=3, adapter_mode=backbone_lib.FACTORED, rank=4)
        self.assertEqual([(s.in_dim, s.out_dim, s.activation) for s in backbone.specs],
                         [(16, 64, "relu"), (64, 64, "relu"), (64, 64, "identity")])
        head = backbone_lib.init_head(64)
        trace = backbone_lib.forward(backbone, head, rng.normal((8, 16)), 0,
                                     capture=True)
        # Hidden maps see relu outputs; the embedding is a linear readout.
        self.assertTrue(np.all(np.asarray(trace.inputs["layer_1"]) >= 0.))
        self.assertTrue(np.all(np.asarray(trace.inputs["layer_2"]) >= 0.))
        self.assertTrue(np.any(np.asarray(trace.embedding) < 0.))

    def test_bad_width(self):
        backbone = _identity_backbone()
        with self.assertRaises(core.ContractViolationError):
            backbone_lib.embed(backbone, np.ones((1, 3)), 1)

    def test_attention_captures_tokens(self):
        backbone, head, rng = _trained_model(backbone_lib.ATTENTION,
                                             backbone_lib.FACTORED)
        trace = backbone_lib.forward(backbone, head, rng.normal((5, 4)), 2,
                                     capture=True)
        self.assertEqual(trace.embedding.shape, (5, 3))
        self.assertEqual(trace.logits.shape, (5, 4))
        self.assertEqual(trace.inputs["key"].shape, (10, 3))
        np.testing.assert_array_equal(trace.inputs["key"], trace.inputs["value"])

    @parameterized.named_parameters(*_KINDS_AND_MODES)
    def test_null_adapter_is_invisible(self, kind, adapter_mode):
        backbone, head, rng = _trained_model(kind, adapter_mode)
        grown = backbone_lib.expand_adapter(backbone, rng)
        x = rng.normal((6, 4))
        np.testing.assert_allclose(
            backbone_lib.embed(grown, x, 3), backbone_lib.embed(backbone, x, 2),
            atol=1e-12)

    def test_gradients_only_for_current_task(self):
        backbone, head, rng = _trained_model(backbone_lib.MLP, backbone_lib.FACTORED)
        with self.assertRaises(core.ContractViolationError):
            backbone_lib.forward(backbone, head, rng.normal((2, 4)), 1, with_grad=True)
        trace = backbone_lib.forward(backbone, head, rng.normal((2, 4)), 2)
        with self.assertRaises(core.ContractViolationError):
            backbone_lib.backward(trace, backbone, head, jnp.zeros((2, 4)))


class BackwardTest(parameterized.TestCase):

    def _loss_fn(self, backbone, head, x, logits_weight, embedding_weight):

        @jax.jit
        def loss(params):
            (embedding, logits), _ = backbone_lib.training_apply(
                backbone, head, params, x)
            return (jnp.sum(logits_weight * logits) +
                    jnp.sum(embedding_weight * embedding))

        return loss

    @parameterized.named_parameters(*_KINDS_AND_MODES)
    def test_matches_finite_differences(self, kind, adapter_mode):
        backbone, head, rng = _trained_model(kind, adapter_mode)
        x = rng.normal((3, 4))
        logits_weight = rng.normal((3, 4))
        embedding_weight = rng.normal((3, 3))
        trace = backbone_lib.forward(backbone, head, x, 2, with_grad=True)
        grads = backbone_lib.backward(trace, backbone, head, logits_weight,
                                      embedding_weight)
        analytic, _ = ravel_pytree(grads)

        flat, unravel = ravel_pytree(backbone_lib.training_params(backbone, head))
        loss = self._loss_fn(backbone, head, jnp.asarray(x), logits_weight,
                             embedding_weight)
        h = 1e-5
        numeric = np.zeros(flat.shape)
        for i in range(flat.size):
            step = jnp.zeros(flat.shape).at[i].set(h)
            numeric[i] = (loss(unravel(flat + step)) -
                          loss(unravel(flat - step))) / (2 * h)
        error = np.linalg.norm(numeric - np.asarray(analytic))
        self.assertLessEqual(error, 1e-4 * max(np.linalg.norm(numeric), 1e-8))

    def test_matches_value_and_grad(self):
        backbone, head, rng = _trained_model(backbone_lib.MLP, backbone_lib.FACTORED)
        x = rng.normal((4, 4))
        logits_weight = rng.normal((4, 4))
        embedding_weight = rng.normal((4, 3))
        trace = backbone_lib.forward(backbone, head, x, 2, with_grad=True)
        grads = backbone_lib.backward(trace, backbone, head, logits_weight,
                                      embedding_weight)
        loss = self._loss_fn(backbone, head, jnp.asarray(x), logits_weight,
                             embedding_weight)
        expected = jax.grad(loss)(backbone_lib.training_params(backbone, head))
        np.testing.assert_allclose(ravel_pytree(grads)[0],
                                   ravel_pytree(expected)[0], atol=1e-12)
        self.assertEqual(set(grads), {"adapter", "head"})
        self.assertEqual(grads["head"]["kernel"].shape, (2, 3))


class HeadTest(absltest.TestCase):

    def test_grow_keeps_old_rows(self):
        head = backbone_lib.grow_head(backbone_lib.init_head(3), [4, 1], 1)
        head = backbone_lib.replace_task_rows(
            head, 1, {"kernel": jnp.ones((2, 3)), "bias": jnp.ones((2,))})
        grown = backbone_lib.grow_head(head, [7], 2)
        self.assertEqual(grown.class_ids, (4, 1, 7))
        self.assertEqual(grown.class_tasks, (1, 1, 2))
        np.testing.assert_array_equal(grown.kernel[:2], np.ones((2, 3)))
        np.testing.assert_array_equal(grown.kernel[2], np.zeros(3))
        np.testing.assert_array_equal(grown.columns_of([7, 4]), [2, 0])

    def test_duplicate_class(self):
        head = backbone_lib.grow_head(backbone_lib.init_head(3), [4], 1)
        with self.assertRaises(core.ContractViolationError):
            backbone_lib.grow_head(head, [4], 2)
        with self.assertRaises(core.ContractViolationError):
            head.columns_of([9])


class ExpandAdapterTest(absltest.TestCase):

    def test_factored_starts_at_zero_update(self):
        rng = core.SeededRng(1)
        backbone = backbone_lib.init_backbone(
            rng, kind=backbone_lib.MLP, d_in=4, hidden_dim=6, embed_dim=3,
            num_layers=2, adapter_mode=backbone_lib.FACTORED, rank=2)
        backbone = backbone_lib.expand_adapter(backbone, rng)
        adapter = backbone.adapters[0]["layer_0"]
        self.assertEqual(adapter["A"].shape, (2, 4))
        self.assertLessEqual(float(jnp.max(jnp.abs(adapter["A"]))), 0.5)
        np.testing.assert_array_equal(adapter["B"], np.zeros((6, 2)))

    def test_basis_confines_down_projection(self):
        rng = core.SeededRng(2)
        backbone = backbone_lib.init_backbone(
            rng, kind=backbone_lib.MLP, d_in=3, hidden_dim=3, embed_dim=3,
            num_layers=1, adapter_mode=backbone_lib.FACTORED, rank=2)
        basis = jnp.array([[1.], [0.], [0.]])
        backbone = backbone_lib.expand_adapter(backbone, rng, {"layer_0": basis})
        a = backbone.adapters[0]["layer_0"]["A"]
        np.testing.assert_allclose(a @ jnp.array([0., 1., 0.]), np.zeros(2), atol=1e-15)
        np.testing.assert_allclose(a @ jnp.array([0., 0., 1.]), np.zeros(2), atol=1e-15)

    def test_rank_checked(self):
        with self.assertRaises(core.ConfigurationError):
            backbone_lib.init_backbone(
                core.SeededRng(0), kind=backbone_lib.MLP, d_in=2, hidden_dim=4,
                embed_dim=4, num_layers=2, adapter_mode=backbone_lib.FACTORED, rank=3)
        with self.assertRaises(core.ConfigurationError):
            backbone_lib.init_backbone(
                core.SeededRng(0), kind=backbone_lib.ATTENTION, d_in=5, hidden_dim=4,
                embed_dim=4, num_layers=2, adapter_mode=backbone_lib.FULL, rank=1,
                num_tokens=2)


if __name__ == "__main__":
    absltest.main()
