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
"""Adam directions and the projected update of the adapter parameters.

The learning rate is not part of the Adam direction: it is applied after the
direction has been projected, as

  param <- param - learning_rate * project(P, direction).
"""

from typing import Any, Mapping, Optional, Tuple

import jax
import jax.numpy as jnp
import optax

from libml import core
from libml import drs
from models import backbone as backbone_lib

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8

AdamState = optax.ScaleByAdamState


def create_adam() -> optax.GradientTransformation:
    """Bias-corrected Adam direction m_hat / (sqrt(v_hat) + eps), no step size."""
    return optax.scale_by_adam(b1=BETA1, b2=BETA2, eps=EPS)


def init_adam(params: Any) -> AdamState:
    return create_adam().init(params)


def adam_direction_value(state: AdamState, gradient: Any) -> Tuple[Any, AdamState]:
    """Traceable Adam step; returns (direction, new state)."""
    return create_adam().update(gradient, state)


def all_finite(tree: Any) -> jnp.ndarray:
    leaves = jax.tree_util.tree_leaves(tree)
    if not leaves:
        return jnp.asarray(True)
    return jnp.all(jnp.stack([jnp.all(jnp.isfinite(leaf)) for leaf in leaves]))


def adam_direction(state: AdamState, gradient: Any) -> Tuple[Any, AdamState]:
    """One Adam step on the host.

    Raises:
      NumericalError: If the gradient holds NaN or Inf; the state is unchanged.
    """
    if not bool(all_finite(gradient)):
        raise core.NumericalError("Gradient is not finite; aborting the step.")
    return adam_direction_value(state, gradient)


def apply_update(parameter: Any, direction: Any,
                 basis: Optional[core.Matrix], learning_rate: float) -> jnp.ndarray:
    """parameter - learning_rate * dw, with dw = direction P P^T when P is given."""
    direction = jnp.asarray(direction, dtype=jnp.float64)
    if basis is not None:
        direction = drs.project(basis, direction)
    return jnp.asarray(parameter, dtype=jnp.float64) - learning_rate * direction


def apply_updates(params: Mapping[str, Any],
                  directions: Mapping[str, Any],
                  bases: Optional[Mapping[str, core.Matrix]],
                  learning_rate: float,
                  adapter_mode: str) -> dict:
    """Updates the trainable parameters of one task.

    Only the input-side factor A (factored mode) or the dense delta (full mode)
    of a map is projected, and only when `bases` holds a basis for that map.
    The output-side factor B and the head are always updated unprojected.
    """
    bases = bases or {}
    projected_key = "A" if adapter_mode == backbone_lib.FACTORED else "delta"
    adapter = {}
    for name, leaves in params["adapter"].items():
        adapter[name] = {
            key: apply_update(value, directions["adapter"][name][key],
                              bases.get(name) if key == projected_key else None,
                              learning_rate)
            for key, value in leaves.items()
        }
    head = {
        key: apply_update(value, directions["head"][key], None, learning_rate)
        for key, value in params["head"].items()
    }
    return {"adapter": adapter, "head": head}
