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
"""Frozen backbone with per-task low-rank adapters and a growing head.

Weights use the column-vector convention z = W x, so a kernel has shape
[out_dim, in_dim] and a batch X of row vectors maps to X @ W.T. The adapted
weight of map l after task t is

  W_t^l = W_0^l + sum_{j <= t} delta_j^l,

where delta_j is B_j @ A_j in factored mode and a dense matrix in full mode.
Only the adapter of the task being trained ever receives gradients.
"""

import functools
from typing import Any, Callable, Dict, Mapping, NamedTuple, Optional, Sequence, Tuple

import flax
import jax
import jax.numpy as jnp
import ml_collections
import numpy as np

from libml import core

Array = jnp.ndarray
Params = Dict[str, Dict[str, Array]]

FACTORED = "factored"
FULL = "full"
MLP = "mlp"
ATTENTION = "attention"

_ACTIVATIONS = {
    "relu": jax.nn.relu,
    "identity": lambda x: x,
}


class LayerSpec(NamedTuple):
    """One linear map of the backbone.

    Attributes:
      name: Parameter name of the map.
      kind: "linear" for MLP layers, "attention_kv" for key/value maps.
      in_dim: Input dimension.
      out_dim: Output dimension.
      activation: "relu" or "identity", applied to the map's output.
    """
    name: str
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "relu"


@flax.struct.dataclass
class Backbone:
    """Frozen pretrained weights plus one adapter per learned task.

    Attributes:
      frozen: Map name -> {"kernel": [out, in], "bias": [out]}. Holds every map,
        adapted or not; never changes once pretraining is over.
      adapters: Per task, adapted map name -> {"A": [r, in], "B": [out, r]} in
        factored mode or {"delta": [out, in]} in full mode.
      kind: "mlp" or "attention".
      specs: The adapted maps, in forward order.
      adapter_mode: "factored" or "full".
      rank: Adapter rank r (factored mode).
      num_tokens: Number of token chunks in attention mode.
    """
    frozen: Params
    adapters: Tuple[Params, ...]
    kind: str = flax.struct.field(pytree_node=False)
    specs: Tuple[LayerSpec, ...] = flax.struct.field(pytree_node=False)
    adapter_mode: str = flax.struct.field(pytree_node=False)
    rank: int = flax.struct.field(pytree_node=False)
    num_tokens: int = flax.struct.field(pytree_node=False, default=1)

    @property
    def num_tasks(self) -> int:
        return len(self.adapters)

    @property
    def adapted_maps(self) -> Tuple[str, ...]:
        return tuple(spec.name for spec in self.specs)

    @property
    def d_in(self) -> int:
        if self.kind == ATTENTION:
            return self.num_tokens * self.frozen["token_embed"]["kernel"].shape[1]
        return self.specs[0].in_dim

    @property
    def embed_dim(self) -> int:
        return self.specs[-1].out_dim

    def spec(self, name: str) -> LayerSpec:
        for spec in self.specs:
            if spec.name == name:
                return spec
        raise core.ContractViolationError(
            f"Unknown adapted map {name!r}; known maps: {self.adapted_maps}.")


@flax.struct.dataclass
class Head:
    """Linear classifier over the embedding, one row per class seen so far.

    Rows are appended in task order; `class_ids[i]` and `class_tasks[i]` give
    the class and the task of row i.
    """
    kernel: Array
    bias: Array
    class_ids: Tuple[int, ...] = flax.struct.field(pytree_node=False)
    class_tasks: Tuple[int, ...] = flax.struct.field(pytree_node=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def rows_of_task(self, t: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.class_tasks, np.int64) == t)

    def columns_of(self, labels: Any) -> np.ndarray:
        """Maps class ids to head rows."""
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return np.asarray([lookup[int(c)] for c in np.asarray(labels)], np.int64)
        except KeyError as e:
            raise core.ContractViolationError(
                f"Class {e.args[0]} has no head row.") from e


@flax.struct.dataclass
class ForwardTrace:
    """Result of a forward pass.

    Attributes:
      inputs: Adapted map name -> input features X^l [rows, in_dim]; empty when
        the pass did not capture. In attention mode the rows are tokens.
      embedding: Final pre-head embedding [batch, embed_dim].
      logits: Head outputs [batch, seen classes].
      through_task: Number of adapters applied.
      pullback: Reverse-mode function of the pass, set when gradients were
        requested.
    """
    inputs: Dict[str, Array]
    embedding: Array
    logits: Array
    through_task: int = flax.struct.field(pytree_node=False)
    pullback: Optional[Callable[..., Any]] = flax.struct.field(
        pytree_node=False, default=None)


def _xavier(key, out_dim: int, in_dim: int) -> Array:
    return jax.nn.initializers.xavier_uniform()(key, (out_dim, in_dim), jnp.float64)


def init_backbone(rng: core.SeededRng,
                  *,
                  kind: str,
                  d_in: int,
                  hidden_dim: int,
                  embed_dim: int,
                  num_layers: int,
                  adapter_mode: str,
                  rank: int,
                  num_tokens: int = 4) -> Backbone:
    """Creates a randomly initialized backbone without adapters."""
    frozen = {}
    if kind == MLP:
        if num_layers < 1:
            raise core.ConfigurationError("An MLP backbone needs at least one layer.")
        dims = [d_in] + [hidden_dim] * (num_layers - 1) + [embed_dim]
        specs = tuple(
            LayerSpec(f"layer_{i}", "linear", dims[i], dims[i + 1],
                      "relu" if i < num_layers - 1 else "identity")
            for i in range(num_layers))
        for spec in specs:
            frozen[spec.name] = {
                "kernel": _xavier(rng.next_key(), spec.out_dim, spec.in_dim),
                "bias": jnp.zeros((spec.out_dim,)),
            }
    elif kind == ATTENTION:
        if num_tokens < 1 or d_in % num_tokens:
            raise core.ConfigurationError(
                f"d_in={d_in} does not split into {num_tokens} token chunks.")
        chunk = d_in // num_tokens
        specs = (
            LayerSpec("key", "attention_kv", embed_dim, embed_dim, "identity"),
            LayerSpec("value", "attention_kv", embed_dim, embed_dim, "identity"),
        )
        for name, in_dim in (("token_embed", chunk), ("query", embed_dim),
                             ("key", embed_dim), ("value", embed_dim)):
            frozen[name] = {
                "kernel": _xavier(rng.next_key(), embed_dim, in_dim),
                "bias": jnp.zeros((embed_dim,)),
            }
    else:
        raise core.ConfigurationError(f"Unknown backbone kind {kind!r}.")
    _check_rank(specs, adapter_mode, rank)
    return Backbone(frozen=frozen, adapters=(), kind=kind, specs=specs,
                    adapter_mode=adapter_mode, rank=rank,
                    num_tokens=num_tokens if kind == ATTENTION else 1)


def _check_rank(specs: Sequence[LayerSpec], adapter_mode: str, rank: int):
    if adapter_mode not in (FACTORED, FULL):
        raise core.ConfigurationError(f"Unknown adapter mode {adapter_mode!r}.")
    if adapter_mode == FACTORED:
        for spec in specs:
            if not 1 <= rank <= min(spec.in_dim, spec.out_dim):
                raise core.ConfigurationError(
                    f"rank={rank} must lie in [1, {min(spec.in_dim, spec.out_dim)}] "
                    f"for map {spec.name}.")


def with_adapter_config(backbone: Backbone, adapter_mode: str, rank: int) -> Backbone:
    """Re-targets a pretrained backbone to another adapter mode or rank."""
    if backbone.num_tasks:
        raise core.ContractViolationError(
            "The adapter layout cannot change once adapters exist.")
    _check_rank(backbone.specs, adapter_mode, rank)
    return backbone.replace(adapter_mode=adapter_mode, rank=rank)


def create_backbone(model_config: ml_collections.ConfigDict, d_in: int,
                    rng: core.SeededRng) -> Backbone:
    """Creates the backbone described by `config.model`."""
    return init_backbone(
        rng,
        kind=model_config.backbone,
        d_in=d_in,
        hidden_dim=model_config.hidden_dim,
        embed_dim=model_config.embed_dim,
        num_layers=model_config.num_layers,
        adapter_mode=model_config.adapter_mode,
        rank=model_config.rank,
        num_tokens=model_config.num_tokens)


def adapter_delta(adapter: Mapping[str, Array], adapter_mode: str) -> Array:
    """The weight-space update of one adapter on one map."""
    if adapter_mode == FACTORED:
        return adapter["B"] @ adapter["A"]
    return adapter["delta"]


def _check_task(backbone: Backbone, through_task: int):
    if not 0 <= through_task <= backbone.num_tasks:
        raise core.ContractViolationError(
            f"through_task={through_task} but only {backbone.num_tasks} tasks "
            "have adapters.")


def adapter_sum(backbone: Backbone, name: str, through_task: int) -> Array:
    """sum_{j <= through_task} delta_j of map `name`, accumulated in task order."""
    spec = backbone.spec(name)
    _check_task(backbone, through_task)
    total = jnp.zeros((spec.out_dim, spec.in_dim))
    for adapter in backbone.adapters[:through_task]:
        total = total + adapter_delta(adapter[name], backbone.adapter_mode)
    return total


def effective_weight(backbone: Backbone, name: str, through_task: int) -> Array:
    """W_0 plus the adapters of tasks 1..through_task, added one at a time."""
    backbone.spec(name)
    _check_task(backbone, through_task)
    weight = backbone.frozen[name]["kernel"]
    for adapter in backbone.adapters[:through_task]:
        weight = weight + adapter_delta(adapter[name], backbone.adapter_mode)
    return weight


def weights_with_kernels(backbone: Backbone,
                         kernels: Mapping[str, Array]) -> Params:
    """Frozen parameters with the kernels of some maps replaced."""
    weights = {name: dict(params) for name, params in backbone.frozen.items()}
    for name, kernel in kernels.items():
        weights[name]["kernel"] = kernel
    return weights


def effective_weights(backbone: Backbone, through_task: int) -> Params:
    return weights_with_kernels(backbone, {
        name: effective_weight(backbone, name, through_task)
        for name in backbone.adapted_maps
    })


def _training_weights(backbone: Backbone, adapter: Params) -> Params:
    """Weights of the last task with its adapter taken from `adapter`."""
    previous = backbone.num_tasks - 1
    return weights_with_kernels(backbone, {
        name: effective_weight(backbone, name, previous) +
        adapter_delta(adapter[name], backbone.adapter_mode)
        for name in backbone.adapted_maps
    })


def _dense(params: Mapping[str, Array], x: Array) -> Array:
    return x @ params["kernel"].T + params["bias"]


def apply_weights(backbone: Backbone, weights: Params,
                  x: Array) -> Tuple[Array, Dict[str, Array]]:
    """Runs the backbone with explicit weights.

    Args:
      backbone: Supplies the architecture.
      weights: Map name -> {"kernel", "bias"} for every map.
      x: [batch, d_in] inputs.

    Returns:
      The embedding [batch, embed_dim] and the inputs of every adapted map.
    """
    captured = {}
    if backbone.kind == MLP:
        for spec in backbone.specs:
            captured[spec.name] = x
            x = _ACTIVATIONS[spec.activation](_dense(weights[spec.name], x))
        return x, captured

    batch = x.shape[0]
    tokens = x.reshape(batch, backbone.num_tokens, -1)
    h = jax.nn.relu(_dense(weights["token_embed"], tokens))
    q = _dense(weights["query"], h)
    k = _dense(weights["key"], h)
    v = _dense(weights["value"], h)
    scores = jnp.einsum("btd,bsd->bts", q, k) / jnp.sqrt(q.shape[-1])
    attended = jnp.einsum("bts,bsd->btd", jax.nn.softmax(scores, axis=-1), v)
    token_rows = h.reshape(batch * backbone.num_tokens, -1)
    captured["key"] = token_rows
    captured["value"] = token_rows
    return jnp.mean(h + attended, axis=1), captured


def head_logits(kernel: Array, bias: Array, embedding: Array) -> Array:
    return embedding @ kernel.T + bias


def _check_batch(backbone: Backbone, batch: Any) -> Array:
    batch = jnp.asarray(batch, dtype=jnp.float64)
    if batch.ndim != 2 or batch.shape[1] != backbone.d_in:
        raise core.ContractViolationError(
            f"Expected a batch of width {backbone.d_in}, got shape {batch.shape}.")
    return batch


def training_params(backbone: Backbone, head: Head) -> Dict[str, Any]:
    """Trainable parameters of the last task: its adapter and its head rows."""
    if not backbone.num_tasks:
        raise core.ContractViolationError("No adapter has been expanded yet.")
    rows = head.rows_of_task(backbone.num_tasks)
    return {
        "adapter": backbone.adapters[-1],
        "head": {"kernel": head.kernel[rows], "bias": head.bias[rows]},
    }


def training_apply(backbone: Backbone, head: Head, params: Mapping[str, Any],
                   x: Array) -> Tuple[Tuple[Array, Array], Dict[str, Array]]:
    """Forward pass as a function of the trainable parameters only.

    Returns:
      ((embedding, logits over all seen classes), captured map inputs).
    """
    embedding, captured = apply_weights(
        backbone, _training_weights(backbone, params["adapter"]), x)
    rows = head.rows_of_task(backbone.num_tasks)
    kernel = head.kernel.at[rows].set(params["head"]["kernel"])
    bias = head.bias.at[rows].set(params["head"]["bias"])
    return (embedding, head_logits(kernel, bias, embedding)), captured


def forward(backbone: Backbone,
            head: Head,
            batch: Any,
            through_task: int,
            capture: bool = False,
            with_grad: bool = False) -> ForwardTrace:
    """Forward pass through the adapters of tasks 1..through_task.

    Args:
      backbone: The backbone.
      head: The classification head.
      batch: [batch, d_in] inputs.
      through_task: Number of adapters to apply.
      capture: Record the input of every adapted map.
      with_grad: Keep the reverse-mode function for `backward`; only allowed
        for the task being trained (the last one).

    Returns:
      The trace of the pass.
    """
    x = _check_batch(backbone, batch)
    _check_task(backbone, through_task)
    if with_grad:
        if through_task != backbone.num_tasks or through_task < 1:
            raise core.ContractViolationError(
                "Gradients are only available for the current task "
                f"{backbone.num_tasks}, not task {through_task}.")
        fn = functools.partial(training_apply, backbone, head, x=x)
        (embedding, logits), pullback, captured = jax.vjp(
            fn, training_params(backbone, head), has_aux=True)
    else:
        embedding, captured = apply_weights(
            backbone, effective_weights(backbone, through_task), x)
        logits = head_logits(head.kernel, head.bias, embedding)
        pullback = None
    return ForwardTrace(
        inputs=captured if capture else {},
        embedding=embedding,
        logits=logits,
        through_task=through_task,
        pullback=pullback)


def backward(trace: ForwardTrace,
             backbone: Backbone,
             head: Head,
             logits_grad: Any,
             embedding_grad: Any = None) -> Dict[str, Any]:
    """Reverse-mode gradients of a scalar loss given its output cotangents.

    Args:
      trace: A trace from `forward(..., with_grad=True)`.
      backbone: The backbone the trace was computed with.
      head: The head the trace was computed with.
      logits_grad: dLoss/dlogits, [batch, seen classes].
      embedding_grad: Optional dLoss/dembedding for losses on the embedding.

    Returns:
      {"adapter": gradients of the current adapter,
       "head": {"kernel", "bias"} gradients of the current task's head rows}.
      W_0 and older adapters are frozen and get no gradient.
    """
    if trace.pullback is None:
        raise core.ContractViolationError("The trace was captured without gradients.")
    if trace.through_task != backbone.num_tasks:
        raise core.ContractViolationError(
            f"Trace of task {trace.through_task} does not match a backbone with "
            f"{backbone.num_tasks} tasks.")
    logits_grad = jnp.asarray(logits_grad, dtype=jnp.float64)
    if logits_grad.shape != trace.logits.shape:
        raise core.ContractViolationError(
            f"Logit gradient shape {logits_grad.shape} does not match logits "
            f"{trace.logits.shape}.")
    if logits_grad.shape[1] != head.num_classes:
        raise core.ContractViolationError("Trace and head disagree on class count.")
    if embedding_grad is None:
        embedding_grad = jnp.zeros_like(trace.embedding)
    (grads,) = trace.pullback(
        (jnp.asarray(embedding_grad, dtype=jnp.float64), logits_grad))
    return grads


def embed(backbone: Backbone, batch: Any, through_task: int) -> Array:
    """Final pre-head embedding M(x) under the adapters of tasks 1..through_task."""
    x = _check_batch(backbone, batch)
    _check_task(backbone, through_task)
    embedding, _ = apply_weights(backbone, effective_weights(backbone, through_task), x)
    return embedding


def init_head(embed_dim: int) -> Head:
    return Head(kernel=jnp.zeros((0, embed_dim)), bias=jnp.zeros((0,)),
                class_ids=(), class_tasks=())


def grow_head(head: Head, new_classes: Sequence[int], task: int) -> Head:
    """Appends zero-initialized rows for `new_classes`; old rows are untouched."""
    new_classes = tuple(int(c) for c in new_classes)
    duplicates = set(head.class_ids).intersection(new_classes)
    if duplicates or len(set(new_classes)) != len(new_classes):
        raise core.ContractViolationError(
            f"Classes {sorted(duplicates) or list(new_classes)} already have head rows.")
    embed_dim = head.kernel.shape[1]
    return Head(
        kernel=jnp.concatenate(
            [head.kernel, jnp.zeros((len(new_classes), embed_dim))], axis=0),
        bias=jnp.concatenate([head.bias, jnp.zeros((len(new_classes),))]),
        class_ids=head.class_ids + new_classes,
        class_tasks=head.class_tasks + (task,) * len(new_classes))


def expand_adapter(backbone: Backbone, rng: core.SeededRng,
                   bases: Optional[Mapping[str, Optional[Array]]] = None) -> Backbone:
    """Appends a fresh adapter for the next task.

    In factored mode A is drawn from U(-1/sqrt(d_in), 1/sqrt(d_in)) and, when a
    basis P is given for the map, replaced by A P P^T so that A x = 0 for every
    x orthogonal to span(P). B starts at zero, so the new adapter starts as a
    zero update. Full mode starts from delta = 0.
    """
    bases = bases or {}
    adapter = {}
    for spec in backbone.specs:
        if backbone.adapter_mode == FACTORED:
            bound = 1. / np.sqrt(spec.in_dim)
            a = jax.random.uniform(rng.next_key(), (backbone.rank, spec.in_dim),
                                   jnp.float64, -bound, bound)
            basis = bases.get(spec.name)
            if basis is not None:
                a = (a @ basis) @ basis.T
            adapter[spec.name] = {"A": a, "B": jnp.zeros((spec.out_dim, backbone.rank))}
        else:
            adapter[spec.name] = {"delta": jnp.zeros((spec.out_dim, spec.in_dim))}
    return backbone.replace(adapters=backbone.adapters + (adapter,))


def replace_last_adapter(backbone: Backbone, adapter: Params) -> Backbone:
    if not backbone.num_tasks:
        raise core.ContractViolationError("No adapter to replace.")
    return backbone.replace(adapters=backbone.adapters[:-1] + (adapter,))


def replace_task_rows(head: Head, task: int, rows_params: Mapping[str, Array]) -> Head:
    rows = head.rows_of_task(task)
    return head.replace(kernel=head.kernel.at[rows].set(rows_params["kernel"]),
                        bias=head.bias.at[rows].set(rows_params["bias"]))
