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
"""Main framework for continual learning in a drift-resistant space.

For every task t the loop runs two stages:

  1. (t >= 2, DRS on) subtract the adapters of tasks 1..t-1 from the frozen
     weights, feed the subtracted model task t's data and build one
     projector per adapted map;
  2. expand a fresh adapter and train it with CE + weight * ATL, projecting
     every Adam direction onto the drift-resistant space.

Afterwards the task's class prototypes are stored, every test set seen so far
is evaluated and the drift of task 1's class centers is measured.
"""

import dataclasses
import functools
import math
import os
from typing import Any, Dict, List, Optional, Tuple

from absl import logging
from clu import metric_writers
from clu import metrics
from clu import parameter_overview
import flax
import jax
import jax.numpy as jnp
import ml_collections
import numpy as np
import optax
import tensorflow as tf

from libml import core
from libml import drs
from libml import eval_metrics
from libml import input_pipeline
from libml import losses
from libml import optim
from libml import utils
from models import backbone as backbone_lib

BACKBONE_KINDS = (backbone_lib.MLP, backbone_lib.ATTENTION)
ADAPTER_MODES = (backbone_lib.FACTORED, backbone_lib.FULL)
DATA_SOURCES = ("synthetic", "csv", "idx")


@flax.struct.dataclass
class TrainMetrics(metrics.Collection):
    accuracy: metrics.Accuracy
    loss: metrics.Average.from_output("loss")
    ce_loss: metrics.Average.from_output("ce_loss")
    atl_loss: metrics.Average.from_output("atl_loss")


@flax.struct.dataclass
class PretrainMetrics(metrics.Collection):
    accuracy: metrics.Accuracy
    loss: metrics.Average.from_output("loss")


@dataclasses.dataclass
class PretrainResult:
    backbone: backbone_lib.Backbone
    accuracy: float
    plateau_epoch: int
    epochs_run: int


@dataclasses.dataclass
class RunState:
    """Everything the task loop carries from one task to the next.

    `projector` belongs to the task trained last; it is kept for diagnostics
    and is never read by a later task.
    """
    backbone: backbone_lib.Backbone
    head: backbone_lib.Head
    prototypes: losses.PrototypeStore
    accuracy: eval_metrics.AccuracyMatrix
    rng: core.SeededRng
    drift: List[float] = dataclasses.field(default_factory=list)
    rank_rows: List[Dict[str, Any]] = dataclasses.field(default_factory=list)
    projector: Optional[drs.Projector] = None
    step: int = 0

    @property
    def tasks_learned(self) -> int:
        return self.backbone.num_tasks


def _require(condition: bool, message: str):
    if not condition:
        raise core.ConfigurationError(message)


def validate_config(config: ml_collections.ConfigDict):
    """Checks every value the run depends on.

    Raises:
      ConfigurationError: Naming the offending key.
    """
    _require(config.data.source in DATA_SOURCES,
             f"data.source must be one of {DATA_SOURCES}, got {config.data.source!r}.")
    _require(config.model.backbone in BACKBONE_KINDS,
             f"model.backbone must be one of {BACKBONE_KINDS}.")
    _require(config.model.adapter_mode in ADAPTER_MODES,
             f"mode must be one of {ADAPTER_MODES}, got {config.model.adapter_mode!r}.")
    _require(config.model.rank >= 1, f"rank must be >= 1, got {config.model.rank}.")
    _require(config.train.epochs_per_task >= 1,
             f"epochs_per_task must be >= 1, got {config.train.epochs_per_task}.")
    _require(config.train.batch_size >= 1,
             f"batch_size must be >= 1, got {config.train.batch_size}.")
    _require(math.isfinite(config.train.learning_rate) and
             config.train.learning_rate >= 0,
             f"learning_rate must be finite and non-negative, got "
             f"{config.train.learning_rate}.")
    _require(0. < config.drs.epsilon <= 1., "epsilon must lie in (0,1]")
    _require(config.drs.source in drs.DRS_SOURCES,
             f"drs_source must be one of {drs.DRS_SOURCES}, got {config.drs.source!r}.")
    _require(config.drs.batch_size >= 1, "drs.batch_size must be >= 1.")
    loss_config = loss_config_from(config)
    if loss_config.atl_enabled:
        _require(config.train.batch_size >= 2,
                 "batch_size must be >= 2 when the triplet loss is enabled.")
    _require(config.pretrain.patience >= 1, "pretrain.patience must be >= 1.")
    _require(config.pretrain.max_epochs >= 1, "pretrain.max_epochs must be >= 1.")
    _require(config.pretrain.learning_rate > 0, "pretrain.learning_rate must be > 0.")


def loss_config_from(config: ml_collections.ConfigDict) -> losses.LossConfig:
    return losses.LossConfig(
        margin=float(config.loss.margin),
        atl_weight=float(config.loss.atl_weight),
        atl_enabled=bool(config.loss.atl_enabled))


def create_writer(config: ml_collections.ConfigDict, workdir: Optional[str]):
    return metric_writers.create_default_writer(
        workdir, just_logging=not (workdir and config.train.tensorboard),
        asynchronous=False)


def _pretrain_columns(classes: Tuple[int, ...], labels: np.ndarray) -> np.ndarray:
    return np.searchsorted(np.asarray(classes, np.int64), labels)


def _make_pretrain_step(backbone: backbone_lib.Backbone,
                        tx: optax.GradientTransformation):
    """Full-parameter training step of the frozen weights and a scratch head."""

    def logits_fn(params, x):
        embedding, _ = backbone_lib.apply_weights(backbone, params["backbone"], x)
        return backbone_lib.head_logits(params["head"]["kernel"],
                                        params["head"]["bias"], embedding)

    @jax.jit
    def step(params, opt_state, x, columns):

        def loss_fn(params):
            logits = logits_fn(params, x)
            mask = jnp.ones((logits.shape[1],), dtype=bool)
            return losses.masked_cross_entropy_value(logits, columns, mask), logits

        (loss, logits), grads = jax.value_and_grad(loss_fn, has_aux=True)(params)
        updates, opt_state = tx.update(grads, opt_state, params)
        params = optax.apply_updates(params, updates)
        update = PretrainMetrics.single_from_model_output(
            loss=loss, logits=logits, labels=columns.astype(jnp.int32))
        return params, opt_state, update, optim.all_finite(grads)

    return step, jax.jit(logits_fn)


def pretrain(stream: input_pipeline.TaskStream,
             config: ml_collections.ConfigDict,
             seed: int,
             writer=None) -> PretrainResult:
    """Trains W0 on the pretraining split until validation accuracy plateaus.

    All weights train with plain Adam. After `config.pretrain.patience` epochs
    without a better validation accuracy (or `max_epochs`), the best weights are
    kept and frozen; the scratch head is discarded.

    Raises:
      ConfigurationError: If the stream has no pretraining split.
      NumericalError: On non-finite gradients.
    """
    split = stream.pretrain
    if not len(split.train) or not len(split.test):
        raise core.ConfigurationError(
            "The dataset has no pretraining split; set data.pretrain_fraction.")
    rng = core.SeededRng(seed).fork("pretrain")
    backbone = backbone_lib.create_backbone(config.model, stream.dim, rng)
    classes = tuple(sorted(split.classes))
    params = {
        "backbone": backbone.frozen,
        "head": {
            "kernel": jnp.zeros((len(classes), backbone.embed_dim)),
            "bias": jnp.zeros((len(classes),)),
        },
    }
    parameter_overview.log_parameter_overview(params["backbone"])
    tx = optax.adam(config.pretrain.learning_rate)
    opt_state = tx.init(params)
    step, logits_fn = _make_pretrain_step(backbone, tx)

    test_x = jnp.asarray(split.test.features)
    test_columns = _pretrain_columns(classes, split.test.labels)
    best_accuracy, best_params, best_epoch, epoch = -1., params, 0, 0
    for epoch in range(1, config.pretrain.max_epochs + 1):
        order = rng.fork(f"shuffle/{epoch}").permutation(len(split.train))
        train_metrics = None
        for batch in split.train.batches(config.pretrain.batch_size, order):
            columns = jnp.asarray(_pretrain_columns(classes, batch.labels))
            params, opt_state, update, finite = step(
                params, opt_state, jnp.asarray(batch.features), columns)
            if not bool(finite):
                raise core.NumericalError(
                    f"Non-finite gradient during pretraining epoch {epoch}.")
            train_metrics = update if train_metrics is None else train_metrics.merge(update)
        predictions = np.argmax(np.asarray(logits_fn(params, test_x)), axis=1)
        accuracy = 100. * int(np.count_nonzero(predictions == test_columns)) / len(
            test_columns)
        if writer is not None:
            scalars = {f"pretrain/train_{k}": v
                       for k, v in train_metrics.compute().items()}
            scalars["pretrain/val_accuracy"] = accuracy
            writer.write_scalars(epoch, scalars)
        if accuracy > best_accuracy:
            best_accuracy, best_params, best_epoch = accuracy, params, epoch
        elif epoch - best_epoch >= config.pretrain.patience:
            break
    logging.info("pretrain_acc=%s plateau_epoch=%d epochs_run=%d", best_accuracy,
                 best_epoch, epoch)
    return PretrainResult(
        backbone=backbone.replace(frozen=best_params["backbone"]),
        accuracy=best_accuracy,
        plateau_epoch=best_epoch,
        epochs_run=epoch)


def prepare_backbone(stream: input_pipeline.TaskStream,
                     config: ml_collections.ConfigDict, seed: int,
                     writer=None) -> backbone_lib.Backbone:
    """Loads the pretrained checkpoint, or pretrains inline when allowed."""
    path = config.pretrain.checkpoint
    if path and tf.io.gfile.exists(path):
        backbone, _, _ = utils.load_checkpoint(path)
        if backbone.num_tasks:
            raise core.ConfigurationError(f"{path} holds adapters; expected W0 only.")
        if backbone.kind != config.model.backbone or backbone.d_in != stream.dim:
            raise core.ConfigurationError(
                f"{path} holds a {backbone.kind} backbone over {backbone.d_in} "
                f"features; the run needs {config.model.backbone} over {stream.dim}.")
        logging.info("Loaded pretrained backbone from %s.", path)
        return backbone_lib.with_adapter_config(
            backbone, config.model.adapter_mode, config.model.rank)
    if path and not config.pretrain.inline:
        raise core.ConfigurationError(f"Pretrained checkpoint {path} does not exist.")
    if not config.pretrain.inline:
        raise core.ConfigurationError(
            "No pretrained checkpoint given and pretrain.inline is off.")
    return pretrain(stream, config, seed, writer).backbone


def init_run_state(backbone: backbone_lib.Backbone, num_tasks: int,
                   seed: int) -> RunState:
    if backbone.num_tasks:
        raise core.ContractViolationError("A run starts from a backbone without adapters.")
    return RunState(
        backbone=backbone,
        head=backbone_lib.init_head(backbone.embed_dim),
        prototypes=losses.PrototypeStore(backbone.embed_dim),
        accuracy=eval_metrics.AccuracyMatrix(num_tasks),
        rng=core.SeededRng(seed))


def task_loss(backbone: backbone_lib.Backbone,
              head: backbone_lib.Head,
              params: Dict[str, Any],
              batch: Dict[str, jnp.ndarray],
              prototypes: jnp.ndarray,
              loss_config: losses.LossConfig):
    """CE over the current task's columns plus the weighted triplet loss.

    Returns:
      The total loss and a dict with its "ce" and "atl" parts and the masked
      "logits".
    """
    (embedding, logits), _ = backbone_lib.training_apply(
        backbone, head, params, batch["features"])
    ce = losses.masked_cross_entropy_value(logits, batch["columns"], batch["mask"])
    if loss_config.atl_enabled:
        atl = losses.triplet_value(embedding, batch["labels"], prototypes,
                                   loss_config.margin)
        total = ce + loss_config.atl_weight * atl
    else:
        atl = jnp.zeros_like(ce)
        total = ce
    masked_logits = jnp.where(batch["mask"][jnp.newaxis, :], logits, -jnp.inf)
    return total, {"ce": ce, "atl": atl, "logits": masked_logits}


@functools.partial(jax.jit, static_argnames=("loss_config",))
def train_step(backbone: backbone_lib.Backbone,
               head: backbone_lib.Head,
               params: Dict[str, Any],
               opt_state: optim.AdamState,
               bases: Dict[str, jnp.ndarray],
               batch: Dict[str, jnp.ndarray],
               prototypes: jnp.ndarray,
               learning_rate: float,
               loss_config: losses.LossConfig):
    """Performs a single projected training step of the current task.

    Args:
      backbone: Backbone whose last adapter is being trained.
      head: Head holding rows for the current task.
      params: Current adapter and head rows (see `training_params`).
      opt_state: Adam state of `params`.
      bases: Adapted map name -> DRS basis; empty for unprojected training.
      batch: "features", "labels" (class ids), "columns" (head rows) and "mask"
        (current-task columns).
      prototypes: Stored prototypes of earlier classes, [classes, embed_dim].
      learning_rate: Step size applied after projection.
      loss_config: Loss weights.

    Returns:
      New params, new Adam state, the metrics update and whether the gradient
      was finite.
    """
    loss_fn = functools.partial(task_loss, backbone, head, batch=batch,
                                prototypes=prototypes, loss_config=loss_config)
    (loss, aux), grads = jax.value_and_grad(loss_fn, has_aux=True)(params)
    finite = optim.all_finite(grads) & jnp.isfinite(loss)
    direction, opt_state = optim.adam_direction_value(opt_state, grads)
    params = optim.apply_updates(params, direction, bases, learning_rate,
                                 backbone.adapter_mode)
    update = TrainMetrics.single_from_model_output(
        loss=loss, ce_loss=aux["ce"], atl_loss=aux["atl"], logits=aux["logits"],
        labels=batch["columns"].astype(jnp.int32))
    return params, opt_state, update, finite


def train_task(state: RunState,
               stream: input_pipeline.TaskStream,
               t: int,
               config: ml_collections.ConfigDict,
               writer=None) -> RunState:
    """Runs both stages of task t and returns the updated state.

    Only task t's training data is read. W0 and the adapters of tasks 1..t-1 are
    not touched: they are closed over by the training step, which only updates
    the current adapter and the current task's head rows.
    """
    if t != state.tasks_learned + 1:
        raise core.ContractViolationError(
            f"Task {t} cannot follow {state.tasks_learned} learned tasks.")
    classes = stream.task(t).classes
    backbone, head = state.backbone, state.head

    bases = {}
    state.projector = None
    if t >= 2 and config.drs.enabled:
        stage1_data = stream.read_train(t, stage=t, purpose="stage1")
        projector = drs.compute_projector(
            backbone, stage1_data, t, epsilon=config.drs.epsilon,
            batch_size=config.drs.batch_size, source=config.drs.source)
        bases = dict(projector.bases)
        state.projector = projector
        state.rank_rows.extend(drs.rank_diagnostics(projector, t))

    initial_bases = bases if backbone.adapter_mode == backbone_lib.FACTORED else None
    backbone = backbone_lib.expand_adapter(
        backbone, state.rng.fork(f"adapter/{t}"), initial_bases)
    head = backbone_lib.grow_head(head, classes, t)
    params = backbone_lib.training_params(backbone, head)
    parameter_overview.log_parameter_overview(params["adapter"])
    opt_state = optim.init_adam(params)

    loss_config = loss_config_from(config)
    prototypes = jnp.asarray(state.prototypes.as_array())
    mask = jnp.asarray(np.asarray(head.class_tasks) == t)
    train_data = stream.read_train(t, stage=t, purpose="stage2")
    for epoch in range(1, config.train.epochs_per_task + 1):
        order = state.rng.fork(f"shuffle/{t}/{epoch}").permutation(len(train_data))
        train_metrics = None
        for batch in train_data.batches(config.train.batch_size, order):
            inputs = {
                "features": jnp.asarray(batch.features),
                "labels": jnp.asarray(batch.labels),
                "columns": jnp.asarray(head.columns_of(batch.labels)),
                "mask": mask,
            }
            params, opt_state, update, finite = train_step(
                backbone, head, params, opt_state, bases, inputs, prototypes,
                config.train.learning_rate, loss_config)
            if not bool(finite):
                raise core.NumericalError(
                    f"Non-finite gradient in task {t}, epoch {epoch}.")
            state.step += 1
            train_metrics = update if train_metrics is None else train_metrics.merge(update)
            logging.log_first_n(logging.INFO, "Finished training step %d.", 5,
                                state.step)
        if writer is not None and train_metrics is not None:
            writer.write_scalars(state.step, {
                f"train/{k}": v for k, v in train_metrics.compute().items()
            })

    state.backbone = backbone_lib.replace_last_adapter(backbone, params["adapter"])
    state.head = backbone_lib.replace_task_rows(head, t, params["head"])
    return state


def compute_prototypes(state: RunState, stream: input_pipeline.TaskStream,
                       t: int) -> RunState:
    """Stores the mean embedding of every class of task t under the model at t."""
    data = stream.read_train(t, stage=t, purpose="prototypes")
    centers = eval_metrics.class_centers(state.backbone, data,
                                         stream.task(t).classes, t)
    for class_id, center in centers.items():
        state.prototypes.add(class_id, center, t)
    return state


def evaluate_tasks_till_now(state: RunState, stream: input_pipeline.TaskStream,
                            t: int) -> List[float]:
    """Fills row t of the accuracy matrix with the accuracy on tasks 1..t."""
    row = []
    for i in range(1, t + 1):
        accuracy = eval_metrics.task_accuracy(state.backbone, state.head,
                                              stream.test_set(i), t)
        state.accuracy.set(t, i, accuracy)
        row.append(accuracy)
    return row


def measure_drift(state: RunState, stream: input_pipeline.TaskStream, t: int) -> float:
    task1 = stream.read_train(1, stage=t, purpose="drift")
    drift = eval_metrics.measure_drift(state.backbone, t, task1, state.prototypes,
                                       stream.task(1).classes)
    state.drift.append(drift)
    return drift


def write_run_outputs(workdir: str, config: ml_collections.ConfigDict,
                      state: RunState) -> Dict[str, Any]:
    """Writes every report file of a run and returns the metrics."""
    fingerprint = utils.config_fingerprint(config)
    utils.write_text(os.path.join(workdir, utils.CONFIG_SNAPSHOT),
                     utils.config_snapshot(config))
    utils.write_accuracy_matrix(os.path.join(workdir, utils.ACCURACY_MATRIX),
                                state.accuracy)
    utils.write_drift(os.path.join(workdir, utils.DRIFT), state.drift)
    utils.write_rank_diagnostics(os.path.join(workdir, utils.RANK_DIAGNOSTICS),
                                 state.rank_rows)
    results = utils.build_metrics(state.accuracy, state.drift,
                                  fingerprint=fingerprint, seed=config.seed)
    utils.write_metrics(os.path.join(workdir, utils.METRICS), results)
    utils.save_checkpoint(os.path.join(workdir, utils.CHECKPOINT), state.backbone,
                          state.head, fingerprint)
    return results


def run_experiment(stream: input_pipeline.TaskStream,
                   config: ml_collections.ConfigDict,
                   *,
                   backbone: Optional[backbone_lib.Backbone] = None,
                   workdir: Optional[str] = None) -> RunState:
    """Runs the whole task stream and optionally writes the run directory.

    Args:
      stream: The task stream.
      config: Validated run configuration.
      backbone: Pretrained backbone; when None it is prepared per `config`.
      workdir: Run directory for reports, checkpoint and summaries.

    Returns:
      The final run state.
    """
    validate_config(config)
    seed = int(config.seed)
    if workdir:
        tf.io.gfile.makedirs(workdir)
    writer = create_writer(config, workdir)
    with metric_writers.ensure_flushes(writer):
        if backbone is None:
            backbone = prepare_backbone(stream, config, seed, writer)
        else:
            backbone = backbone_lib.with_adapter_config(
                backbone, config.model.adapter_mode, config.model.rank)
        state = init_run_state(backbone, stream.num_tasks, seed)
        for t in range(1, stream.num_tasks + 1):
            logging.info("Working on task %d of %d.", t, stream.num_tasks)
            state = train_task(state, stream, t, config, writer)
            state = compute_prototypes(state, stream, t)
            row = evaluate_tasks_till_now(state, stream, t)
            drift = measure_drift(state, stream, t)
            scalars = {f"eval/accuracy_task_{i}": acc for i, acc in enumerate(row, 1)}
            scalars["eval/avg_acc"] = eval_metrics.stage_accuracy(state.accuracy, t)
            scalars["eval/drift"] = drift
            if t >= 2:
                scalars["eval/forgetting"] = eval_metrics.forgetting(state.accuracy)
                scalars["eval/bwt"] = eval_metrics.backward_transfer(state.accuracy)
            writer.write_scalars(t, scalars)
            logging.info("Task %d: ACC_t=%.2f drift=%.6g", t, scalars["eval/avg_acc"],
                         drift)
        if workdir:
            write_run_outputs(workdir, config, state)
    return state
