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
"""Numeric substrate shared by every module: float64 matrices and seeded rngs.

Importing this module switches JAX to 64-bit mode. The projector algebra and
the finite-difference gradient checks need tolerances of 1e-8 to 1e-10, which
float32 cannot reach, so every other module imports `core` first.
"""

import zlib
from typing import Any, Sequence, Tuple

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # pylint: disable=g-import-not-at-top
import numpy as np  # pylint: disable=g-import-not-at-top

Matrix = jnp.ndarray
PRNGKey = Any

# Relative tolerances of the symmetric eigensolver contract.
SYMMETRY_RTOL = 1e-9
PSD_RTOL = 1e-9
# Columns whose residual norm falls below this fraction are linearly dependent.
RANK_RTOL = 1e-10


class ContractViolationError(ValueError):
    """An operation was called outside of its documented contract."""


class DegenerateInputError(ValueError):
    """The input is well-formed but carries no usable information."""


class ConfigurationError(ValueError):
    """A configuration value is invalid."""


class DataFormatError(ValueError):
    """A data file could not be parsed."""


class NumericalError(ArithmeticError):
    """A numeric routine produced non-finite values or failed to converge."""


def as_matrix(data: Any) -> Matrix:
    """Converts `data` to a finite float64 matrix.

    Args:
      data: Anything `jnp.asarray` accepts with exactly two dimensions.

    Returns:
      The float64 matrix.

    Raises:
      ContractViolationError: If `data` is not 2-D, is empty or holds NaN/Inf.
    """
    matrix = jnp.asarray(data, dtype=jnp.float64)
    if matrix.ndim != 2:
        raise ContractViolationError(
            f"Expected a 2-D matrix but got shape {matrix.shape}.")
    if matrix.shape[0] < 1 or matrix.shape[1] < 1:
        raise ContractViolationError(
            f"Matrix dimensions must be positive, got {matrix.shape}.")
    if not bool(jnp.all(jnp.isfinite(matrix))):
        raise ContractViolationError("Matrix entries must be finite.")
    return matrix


def eigh_psd(s: Any) -> Tuple[Matrix, Matrix]:
    """Eigendecomposition of a symmetric positive semi-definite matrix.

    Eigenvalues come back in descending order. Ties keep the order of the
    solver's output (stable sort), so runs are reproducible. Negative round-off
    eigenvalues are clamped to zero.

    Args:
      s: [d, d] symmetric PSD matrix.

    Returns:
      A tuple `(eigenvalues, eigenvectors)` of shapes [d] and [d, d], with
      `s ~= u @ diag(eigenvalues) @ u.T`.

    Raises:
      ContractViolationError: If `s` is not square, not symmetric or not PSD.
      NumericalError: If the eigensolver returns non-finite values.
    """
    s = as_matrix(s)
    d, d_other = s.shape
    if d != d_other:
        raise ContractViolationError(f"eigh_psd needs a square matrix, got {s.shape}.")
    scale = float(jnp.max(jnp.abs(s)))
    asymmetry = float(jnp.max(jnp.abs(s - s.T)))
    if asymmetry > SYMMETRY_RTOL * max(scale, np.finfo(np.float64).tiny):
        raise ContractViolationError(
            f"eigh_psd needs a symmetric matrix; max |S - S^T| = {asymmetry:.3e}.")

    eigenvalues, eigenvectors = jnp.linalg.eigh(0.5 * (s + s.T))
    if not (bool(jnp.all(jnp.isfinite(eigenvalues))) and
            bool(jnp.all(jnp.isfinite(eigenvectors)))):
        raise NumericalError(
            f"Symmetric eigensolver did not converge for a {d}x{d} matrix.")

    trace = float(jnp.trace(s))
    smallest = float(jnp.min(eigenvalues))
    if smallest < -PSD_RTOL * max(abs(trace), np.finfo(np.float64).tiny):
        raise ContractViolationError(
            f"eigh_psd needs a PSD matrix; smallest eigenvalue {smallest:.3e}.")

    order = np.argsort(-np.asarray(eigenvalues), kind="stable")
    eigenvalues = jnp.maximum(eigenvalues[order], 0.)
    eigenvectors = eigenvectors[:, order]
    return eigenvalues, eigenvectors


def orthonormalize(v: Any) -> Matrix:
    """Returns an orthonormal basis with the same column span as `v`.

    Columns are processed left to right, and every output column has a positive
    inner product with the matching input column, so orthonormal input comes
    back unchanged.

    Raises:
      DegenerateInputError: If a column is linearly dependent on the previous
        ones; the message names the column.
    """
    v = as_matrix(v)
    if v.shape[1] > v.shape[0]:
        raise DegenerateInputError(
            f"{v.shape[1]} columns of dimension {v.shape[0]} cannot be independent.")
    q, r = jnp.linalg.qr(v, mode="reduced")
    diag = jnp.diagonal(r)
    norms = jnp.linalg.norm(v, axis=0)
    dependent = np.flatnonzero(
        np.asarray(jnp.abs(diag) <= RANK_RTOL * jnp.maximum(norms, 1.)))
    if dependent.size:
        raise DegenerateInputError(
            f"Column {int(dependent[0])} is linearly dependent on the previous ones.")
    return q * jnp.sign(diag)[jnp.newaxis, :]


def label_hash(label: str) -> int:
    """Stable 32-bit hash of a purpose label, identical on every platform."""
    return zlib.crc32(label.encode("utf-8"))


class SeededRng:
    """Deterministic random stream keyed by a 64-bit seed.

    Draws advance an internal JAX key, so two instances with the same seed emit
    the same stream. `fork` derives an independent stream from the seed and a
    label only, regardless of how many draws were taken.
    """

    def __init__(self, seed: int, key: PRNGKey = None):
        self._seed = int(seed)
        self._root = jax.random.PRNGKey(self._seed) if key is None else key
        self._key = self._root

    @property
    def seed(self) -> int:
        return self._seed

    def fork(self, label: str) -> "SeededRng":
        return SeededRng(self._seed,
                         key=jax.random.fold_in(self._root, label_hash(label)))

    def next_key(self) -> PRNGKey:
        self._key, subkey = jax.random.split(self._key)
        return subkey

    def uniform(self, shape: Sequence[int], minval: float = 0.,
                maxval: float = 1.) -> np.ndarray:
        return np.asarray(
            jax.random.uniform(self.next_key(), tuple(shape), jnp.float64,
                               minval, maxval))

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        return np.asarray(
            jax.random.normal(self.next_key(), tuple(shape), jnp.float64))

    def permutation(self, n: int) -> np.ndarray:
        return np.asarray(jax.random.permutation(self.next_key(), n))
