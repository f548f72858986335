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
"""Drift-resistant space: LoRA subtraction, feature covariance and projectors.

Before task t is trained, the adapters of tasks 1..t-1 are subtracted from the
pretrained weights, task t's training data is pushed through that view, and the
top principal directions of every adapted map's input covariance become the
subspace that task t's updates are confined to.
"""

from typing import Dict, List, Mapping, Optional, Tuple

from absl import logging
import flax
import jax.numpy as jnp
import numpy as np

from libml import core
from libml import input_pipeline
from models import backbone as backbone_lib

SUBTRACTED = "subtracted"
PRETRAINED = "pretrained"
DRS_SOURCES = (SUBTRACTED, PRETRAINED)

# Relative gap under which eigenvalues on both sides of the rank cut count as
# one degenerate block.
DEGENERATE_GAP_RTOL = 1e-12


@flax.struct.dataclass
class TaskVector:
    """Per adapted map, V = sum of the deltas of tasks 1..through_task."""
    vectors: Dict[str, core.Matrix]
    through_task: int = flax.struct.field(pytree_node=False)

    def __getitem__(self, name: str) -> core.Matrix:
        return self.vectors[name]


@flax.struct.dataclass
class Projector:
    """Per adapted map, an orthonormal basis P [d, k] of the retained subspace.

    Maps whose covariance was all zero are listed in `skipped`, have no basis
    and are trained without projection.
    """
    bases: Dict[str, core.Matrix]
    eigenvalues: Dict[str, core.Matrix]
    skipped: Tuple[str, ...] = flax.struct.field(pytree_node=False, default=())

    @property
    def ranks(self) -> Dict[str, int]:
        return {name: int(basis.shape[1]) for name, basis in self.bases.items()}

    def basis(self, name: str) -> Optional[core.Matrix]:
        return self.bases.get(name)


class CovarianceAccumulator:
    """Running sums S = sum over batches of X^T X, one per adapted map.

    Every batch contribution is symmetrized before it is added, so S stays
    exactly symmetric. Batches are consumed in a fixed order.
    """

    def __init__(self, dims: Mapping[str, int]):
        self._sums = {name: jnp.zeros((d, d)) for name, d in dims.items()}
        self._counts = {name: 0 for name in dims}

    @property
    def maps(self) -> Tuple[str, ...]:
        return tuple(self._sums)

    def count(self, name: str) -> int:
        return self._counts[name]

    def running_sum(self, name: str) -> core.Matrix:
        return self._sums[name]

    def update(self, captured: Mapping[str, core.Matrix]):
        for name, x in captured.items():
            if name not in self._sums:
                raise core.ContractViolationError(f"Unknown adapted map {name!r}.")
            x = jnp.asarray(x, dtype=jnp.float64)
            if x.ndim != 2 or x.shape[1] != self._sums[name].shape[0]:
                raise core.ContractViolationError(
                    f"Features of shape {x.shape} do not fit map {name!r}.")
            gram = x.T @ x
            self._sums[name] = self._sums[name] + 0.5 * (gram + gram.T)
            self._counts[name] += int(x.shape[0])

    def finalize(self) -> Dict[str, core.Matrix]:
        """Uncentered covariance (1/n) S per map."""
        covariances = {}
        for name, total in self._sums.items():
            if not self._counts[name]:
                raise core.DegenerateInputError(
                    f"No features were collected for map {name!r}.")
            covariances[name] = total / self._counts[name]
        return covariances


def task_vector(backbone: backbone_lib.Backbone, up_to_task: int) -> TaskVector:
    """V^l = effective_weight(l, up_to_task) - W0^l for every adapted map."""
    return TaskVector(
        vectors={
            name: backbone_lib.adapter_sum(backbone, name, up_to_task)
            for name in backbone.adapted_maps
        },
        through_task=up_to_task)


def lora_subtract(backbone: backbone_lib.Backbone,
                  t: int) -> Dict[str, core.Matrix]:
    """Subtracted kernels W0 - V_{t-1} seen before training task t.

    The backbone itself is not modified.
    """
    if t < 2:
        raise core.ContractViolationError(
            f"LoRA subtraction needs a previous task; got t={t}.")
    vector = task_vector(backbone, t - 1)
    return {
        name: backbone.frozen[name]["kernel"] - vector[name]
        for name in backbone.adapted_maps
    }


def drs_view(backbone: backbone_lib.Backbone, t: int,
             source: str = SUBTRACTED) -> backbone_lib.Params:
    """Weights of the network that task t's data is fed through."""
    if source == SUBTRACTED:
        return backbone_lib.weights_with_kernels(backbone, lora_subtract(backbone, t))
    if source == PRETRAINED:
        return backbone_lib.weights_with_kernels(backbone, {})
    raise core.ConfigurationError(
        f"drs_source must be one of {DRS_SOURCES}, got {source!r}.")


def collect_covariance(backbone: backbone_lib.Backbone,
                       view: backbone_lib.Params,
                       dataset: input_pipeline.Dataset,
                       batch_size: int) -> CovarianceAccumulator:
    """Accumulates the input covariance of every adapted map under `view`.

    Args:
      backbone: Supplies the architecture.
      view: Weights to run, usually from `drs_view`.
      dataset: The current task's full training set.
      batch_size: Rows per forward pass; does not change the result beyond
        round-off.

    Returns:
      The filled accumulator. In attention mode the rows are tokens.

    Raises:
      DegenerateInputError: If `dataset` is empty.
    """
    if not len(dataset):
        raise core.DegenerateInputError("Cannot collect covariance of an empty dataset.")
    accumulator = CovarianceAccumulator(
        {spec.name: spec.in_dim for spec in backbone.specs})
    for batch in dataset.batches(batch_size):
        _, captured = backbone_lib.apply_weights(
            backbone, view, jnp.asarray(batch.features))
        accumulator.update(captured)
    return accumulator


def select_rank(eigenvalues, epsilon: float) -> int:
    """Smallest k whose leading eigenvalues hold at least `epsilon` of the total.

    Args:
      eigenvalues: Non-negative values in descending order.
      epsilon: Variance threshold in (0, 1].

    Returns:
      k in [1, d].

    Raises:
      ContractViolationError: On negative eigenvalues or epsilon out of range.
      DegenerateInputError: If every eigenvalue is zero.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64).reshape(-1)
    if not 0. < epsilon <= 1.:
        raise core.ContractViolationError(f"epsilon must lie in (0,1], got {epsilon}.")
    if not eigenvalues.size or np.any(eigenvalues < 0):
        raise core.ContractViolationError(
            "Eigenvalues must be a non-empty list of non-negative values.")
    cumulative = np.cumsum(eigenvalues)
    total = cumulative[-1]
    if total <= 0:
        raise core.DegenerateInputError("All eigenvalues are zero; rank is undefined.")
    return int(np.argmax(cumulative / total >= epsilon)) + 1


def _straddles_cut(eigenvalues: np.ndarray, k: int) -> bool:
    if k >= eigenvalues.size:
        return False
    gap = eigenvalues[k - 1] - eigenvalues[k]
    return gap <= DEGENERATE_GAP_RTOL * max(eigenvalues[0], np.finfo(np.float64).tiny)


def build_projector(covariances: Mapping[str, core.Matrix],
                    epsilon: float,
                    on_degenerate: str = "raise") -> Projector:
    """Keeps the top-k eigenvectors of every map's covariance.

    Args:
      covariances: Map name -> finalized covariance, e.g. from
        `CovarianceAccumulator.finalize`.
      epsilon: Variance threshold of `select_rank`.
      on_degenerate: "raise" propagates the error of an all-zero covariance;
        "skip" leaves that map without a basis and logs a warning.

    Returns:
      The projector.
    """
    if isinstance(covariances, CovarianceAccumulator):
        covariances = covariances.finalize()
    bases, spectra, skipped = {}, {}, []
    for name, covariance in covariances.items():
        eigenvalues, eigenvectors = core.eigh_psd(covariance)
        host_eigenvalues = np.asarray(eigenvalues)
        try:
            k = select_rank(host_eigenvalues, epsilon)
        except core.DegenerateInputError:
            if on_degenerate != "skip":
                raise
            logging.warning("Covariance of map %s is all zero; its update stays "
                            "unprojected.", name)
            skipped.append(name)
            continue
        if _straddles_cut(host_eigenvalues, k):
            logging.warning(
                "Map %s: a degenerate eigenvalue block straddles the rank cut at "
                "k=%d; keeping the members ordered first.", name, k)
        bases[name] = eigenvectors[:, :k]
        spectra[name] = eigenvalues
    return Projector(bases=bases, eigenvalues=spectra, skipped=tuple(skipped))


def project(basis: core.Matrix, gradient) -> core.Matrix:
    """G P P^T: the gradient's input-dimension side restricted to span(P)."""
    gradient = jnp.asarray(gradient, dtype=jnp.float64)
    if gradient.ndim != 2 or gradient.shape[1] != basis.shape[0]:
        raise core.ContractViolationError(
            f"Gradient of shape {gradient.shape} does not fit a projector on "
            f"dimension {basis.shape[0]}.")
    return (gradient @ basis) @ basis.T


def compute_projector(backbone: backbone_lib.Backbone,
                      dataset: input_pipeline.Dataset,
                      t: int,
                      *,
                      epsilon: float,
                      batch_size: int,
                      source: str = SUBTRACTED) -> Projector:
    """Stage 1 for task t: pass D_t through the chosen view and build P."""
    view = drs_view(backbone, t, source)
    accumulator = collect_covariance(backbone, view, dataset, batch_size)
    projector = build_projector(accumulator.finalize(), epsilon, on_degenerate="skip")
    for name, rank in projector.ranks.items():
        logging.info("Task %d map %s: retained rank %d of %d.", t, name, rank,
                     backbone.spec(name).in_dim)
    return projector


def rank_diagnostics(projector: Projector, task: int) -> List[Dict[str, float]]:
    """Rows of `task,layer,rank_k,dim_d,top_eigenvalue,retained_ratio`."""
    rows = []
    for name, basis in projector.bases.items():
        eigenvalues = np.asarray(projector.eigenvalues[name])
        k = int(basis.shape[1])
        cumulative = np.cumsum(eigenvalues)
        rows.append({
            "task": task,
            "layer": name,
            "rank_k": k,
            "dim_d": int(basis.shape[0]),
            "top_eigenvalue": float(eigenvalues[0]),
            "retained_ratio": float(cumulative[k - 1] / cumulative[-1]),
        })
    return rows
