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
"""Model training loss utilities.

The `*_value` functions are pure and traceable, so the jitted training step
differentiates them directly. The public wrappers check their contract on the
host and return the loss together with its exact gradient.
"""

import math
from typing import Dict, Optional, Tuple

from flax import struct
import jax
import jax.numpy as jnp
import numpy as np

from libml import core


@struct.dataclass
class LossConfig:
    """Weights of the combined objective CE + atl_weight * ATL.

    Every field is static, so the config can be a static `jax.jit` argument.
    """
    margin: float = struct.field(pytree_node=False, default=0.5)
    atl_weight: float = struct.field(pytree_node=False, default=0.1)
    atl_enabled: bool = struct.field(pytree_node=False, default=True)

    def __post_init__(self):
        for name in ("margin", "atl_weight"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise core.ConfigurationError(
                    f"{name} must be finite and non-negative, got {value}.")


class PrototypeStore:
    """Append-only map from class id to its mean embedding.

    A prototype is written once, when its task finishes, and is read-only
    afterwards.
    """

    def __init__(self, embed_dim: int):
        self._embed_dim = int(embed_dim)
        self._vectors: Dict[int, np.ndarray] = {}
        self._tasks: Dict[int, int] = {}

    @property
    def embed_dim(self) -> int:
        return self._embed_dim

    @property
    def classes(self) -> Tuple[int, ...]:
        return tuple(sorted(self._vectors))

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, class_id: int) -> bool:
        return int(class_id) in self._vectors

    def add(self, class_id: int, vector, task: int):
        class_id = int(class_id)
        if class_id in self._vectors:
            raise core.ContractViolationError(
                f"Class {class_id} already has a prototype.")
        vector = np.array(vector, dtype=np.float64, copy=True).reshape(-1)
        if vector.shape != (self._embed_dim,):
            raise core.ContractViolationError(
                f"Prototype of dimension {vector.shape[0]} does not match the "
                f"embedding dimension {self._embed_dim}.")
        if not np.all(np.isfinite(vector)):
            raise core.NumericalError(f"Prototype of class {class_id} is not finite.")
        vector.setflags(write=False)
        self._vectors[class_id] = vector
        self._tasks[class_id] = int(task)

    def get(self, class_id: int) -> np.ndarray:
        try:
            return self._vectors[int(class_id)]
        except KeyError:
            raise core.ContractViolationError(
                f"No prototype stored for class {class_id}.") from None

    def task_of(self, class_id: int) -> int:
        self.get(class_id)
        return self._tasks[int(class_id)]

    def classes_of_task(self, task: int) -> Tuple[int, ...]:
        return tuple(c for c in self.classes if self._tasks[c] == task)

    def as_array(self) -> np.ndarray:
        """Prototypes stacked in ascending class-id order, [classes, embed_dim]."""
        if not self._vectors:
            return np.zeros((0, self._embed_dim))
        return np.stack([self._vectors[c] for c in self.classes])


def _prototype_array(prototypes, embed_dim: int) -> jnp.ndarray:
    if prototypes is None:
        return jnp.zeros((0, embed_dim))
    if isinstance(prototypes, PrototypeStore):
        prototypes = prototypes.as_array()
    return jnp.asarray(prototypes, dtype=jnp.float64).reshape(-1, embed_dim)


def masked_cross_entropy_value(logits: jnp.ndarray, labels: jnp.ndarray,
                               class_mask: jnp.ndarray) -> jnp.ndarray:
    """Mean softmax cross-entropy restricted to the columns in `class_mask`."""
    masked = jnp.where(class_mask[jnp.newaxis, :], logits, -jnp.inf)
    logp = jax.nn.log_softmax(masked, axis=-1)
    loglik = jnp.take_along_axis(logp, labels[:, jnp.newaxis], axis=1)
    return -jnp.mean(loglik)


def cross_entropy(logits, labels, class_mask) -> Tuple[jnp.ndarray, jnp.ndarray]:
    """Masked softmax cross-entropy and its gradient.

    Args:
      logits: [batch, classes].
      labels: [batch] column indices into `logits`.
      class_mask: [classes] booleans, True for the classes that compete.

    Returns:
      (mean loss, d loss / d logits).

    Raises:
      ContractViolationError: If a label falls outside the mask.
    """
    logits = jnp.asarray(logits, dtype=jnp.float64)
    labels = np.asarray(labels, dtype=np.int64)
    class_mask = np.asarray(class_mask, dtype=bool)
    if logits.ndim != 2 or class_mask.shape != (logits.shape[1],):
        raise core.ContractViolationError(
            f"Logits {logits.shape} and mask {class_mask.shape} do not match.")
    if labels.shape != (logits.shape[0],):
        raise core.ContractViolationError(
            f"Expected {logits.shape[0]} labels, got shape {labels.shape}.")
    if np.any(labels < 0) or np.any(labels >= class_mask.size) or not np.all(
            class_mask[np.clip(labels, 0, class_mask.size - 1)]):
        raise core.ContractViolationError("Every label must lie inside the class mask.")
    return jax.value_and_grad(masked_cross_entropy_value)(
        logits, jnp.asarray(labels), jnp.asarray(class_mask))


def _norm(diff: jnp.ndarray) -> jnp.ndarray:
    """Euclidean norm over the last axis with a zero gradient at zero."""
    squared = jnp.sum(diff * diff, axis=-1)
    positive = squared > 0
    return jnp.where(positive, jnp.sqrt(jnp.where(positive, squared, 1.)), 0.)


def pairwise_distances(embeddings: jnp.ndarray) -> jnp.ndarray:
    return _norm(embeddings[:, jnp.newaxis, :] - embeddings[jnp.newaxis, :, :])


def _mine(embeddings: jnp.ndarray, labels: jnp.ndarray,
          prototypes: jnp.ndarray) -> Dict[str, jnp.ndarray]:
    """Batch-hard mining with prototypes as extra negatives.

    Ties go to the lowest sample index, then to the lowest class id among
    prototypes; an in-batch negative wins a tie against a prototype.
    """
    batch = embeddings.shape[0]
    distances = pairwise_distances(embeddings)
    same = labels[:, jnp.newaxis] == labels[jnp.newaxis, :]
    positives = same & ~jnp.eye(batch, dtype=bool)
    negatives = ~same

    positive_index = jnp.argmax(jnp.where(positives, distances, -jnp.inf), axis=1)
    e_ap = jnp.take_along_axis(distances, positive_index[:, jnp.newaxis], axis=1)[:, 0]
    has_positive = jnp.any(positives, axis=1)

    negative_index = jnp.argmin(jnp.where(negatives, distances, jnp.inf), axis=1)
    has_negative = jnp.any(negatives, axis=1)
    e_batch = jnp.where(
        has_negative,
        jnp.take_along_axis(distances, negative_index[:, jnp.newaxis], axis=1)[:, 0],
        jnp.inf)

    if prototypes.shape[0]:
        prototypes = jax.lax.stop_gradient(prototypes)
        to_prototypes = _norm(embeddings[:, jnp.newaxis, :] - prototypes[jnp.newaxis])
        prototype_index = jnp.argmin(to_prototypes, axis=1)
        e_proto = jnp.take_along_axis(
            to_prototypes, prototype_index[:, jnp.newaxis], axis=1)[:, 0]
        has_negative = jnp.ones_like(has_negative)
    else:
        prototype_index = jnp.full((batch,), -1)
        e_proto = jnp.full((batch,), jnp.inf)
    from_batch = e_batch <= e_proto
    return {
        "e_ap": e_ap,
        "e_an": jnp.where(from_batch, e_batch, e_proto),
        "valid": has_positive & has_negative,
        "has_positive": has_positive,
        "has_negative": has_negative,
        "positive_index": positive_index,
        "negative_index": negative_index,
        "prototype_index": prototype_index,
        "from_batch": from_batch,
    }


def triplet_value(embeddings: jnp.ndarray, labels: jnp.ndarray,
                  prototypes: jnp.ndarray, margin: float) -> jnp.ndarray:
    """Mean hinge max(0, e_ap - e_an + margin) over the anchors that qualify."""
    mined = _mine(embeddings, labels, prototypes)
    hinge = jnp.maximum(mined["e_ap"] - mined["e_an"] + margin, 0.)
    valid = mined["valid"]
    total = jnp.sum(jnp.where(valid, hinge, 0.))
    return total / jnp.maximum(jnp.sum(valid), 1)


def _check_triplet_batch(embeddings, labels) -> Tuple[jnp.ndarray, jnp.ndarray]:
    embeddings = jnp.asarray(embeddings, dtype=jnp.float64)
    labels = jnp.asarray(labels)
    if embeddings.ndim != 2 or labels.shape != (embeddings.shape[0],):
        raise core.ContractViolationError(
            f"Embeddings {embeddings.shape} and labels {labels.shape} do not match.")
    return embeddings, labels


def hardest_positive(embeddings, labels, anchor: int) -> Optional[float]:
    """Largest distance from `anchor` to another sample of its class.

    Returns None when the anchor has no positive in the batch.
    """
    embeddings, labels = _check_triplet_batch(embeddings, labels)
    mined = _mine(embeddings, labels, jnp.zeros((0, embeddings.shape[1])))
    if not bool(mined["has_positive"][anchor]):
        return None
    return float(mined["e_ap"][anchor])


def hardest_negative(embeddings, labels, anchor: int,
                     prototypes=None) -> Optional[float]:
    """Smallest distance from `anchor` to another class or a stored prototype.

    Returns None when neither source has a candidate.
    """
    embeddings, labels = _check_triplet_batch(embeddings, labels)
    mined = _mine(embeddings, labels,
                  _prototype_array(prototypes, embeddings.shape[1]))
    if not bool(mined["has_negative"][anchor]):
        return None
    return float(mined["e_an"][anchor])


def augmented_triplet_loss(embeddings, labels, prototypes,
                           margin: float) -> Tuple[jnp.ndarray, jnp.ndarray]:
    """Batch-hard triplet loss whose negatives include old-class prototypes.

    Args:
      embeddings: [batch, embed_dim] raw embeddings.
      labels: [batch] class ids.
      prototypes: PrototypeStore, [classes, embed_dim] array or None.
      margin: Hinge margin.

    Returns:
      (loss, d loss / d embeddings). Prototypes are constants.

    Raises:
      DegenerateInputError: For a batch of one sample.
    """
    embeddings, labels = _check_triplet_batch(embeddings, labels)
    if embeddings.shape[0] < 2:
        raise core.DegenerateInputError("The triplet loss needs at least two samples.")
    prototypes = _prototype_array(prototypes, embeddings.shape[1])
    return jax.value_and_grad(triplet_value)(embeddings, labels, prototypes, margin)


def total_loss(ce: Tuple[jnp.ndarray, jnp.ndarray],
               atl: Optional[Tuple[jnp.ndarray, jnp.ndarray]],
               atl_weight: float):
    """L_total = L_CE + atl_weight * L_TL with the matching gradients.

    Args:
      ce: (loss, d loss / d logits) from `cross_entropy`.
      atl: (loss, d loss / d embeddings) from `augmented_triplet_loss`, or None
        when the triplet term is disabled.
      atl_weight: Non-negative weight of the triplet term.

    Returns:
      (total loss, d total / d logits, d total / d embeddings or None).
    """
    ce_loss, ce_grad = ce
    if atl is None or atl_weight == 0:
        return ce_loss, ce_grad, None
    atl_loss, atl_grad = atl
    return ce_loss + atl_weight * atl_loss, ce_grad, atl_weight * atl_grad
