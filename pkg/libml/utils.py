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
"""General utility functions: fingerprints, checkpoints and report files."""

import csv
import hashlib
import io
import json
import os
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from absl import logging
import flax
import jax
import ml_collections
import numpy as np
import tensorflow as tf

from libml import core
from libml import eval_metrics
from models import backbone as backbone_lib

CHECKPOINT_VERSION = 1

CONFIG_SNAPSHOT = "config.snapshot"
ACCURACY_MATRIX = "accuracy_matrix.csv"
METRICS = "metrics.json"
DRIFT = "drift.csv"
RANK_DIAGNOSTICS = "rank_diagnostics.csv"
CHECKPOINT = "checkpoint.bin"
COMPARISON = "comparison.csv"
ABLATION_SUMMARY = "ablation_summary.csv"

RANK_DIAGNOSTICS_FIELDS = ("task", "layer", "rank_k", "dim_d", "top_eigenvalue",
                           "retained_ratio")
SUMMARY_METRICS = ("avg_acc", "bwt", "final_drift", "new_class_acc")


def config_snapshot(config: ml_collections.ConfigDict) -> str:
    return config.to_json(sort_keys=True, indent=2) + "\n"


def config_fingerprint(config: ml_collections.ConfigDict) -> str:
    return hashlib.sha256(config_snapshot(config).encode("utf-8")).hexdigest()


def write_text(path: str, text: str):
    directory = os.path.dirname(path)
    if directory:
        tf.io.gfile.makedirs(directory)
    with tf.io.gfile.GFile(path, "w") as f:
        f.write(text)


def _open_existing(path: str, mode: str):
    if not tf.io.gfile.exists(path):
        raise FileNotFoundError(f"{path}: no such file.")
    return tf.io.gfile.GFile(path, mode)


def read_text(path: str) -> str:
    with _open_existing(path, "r") as f:
        return f.read()


def _write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    write_text(path, buffer.getvalue())


def _format_real(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _to_host(tree: Any) -> Any:
    return jax.tree_util.tree_map(np.asarray, tree)


def save_checkpoint(path: str, backbone: backbone_lib.Backbone,
                    head: backbone_lib.Head, fingerprint: str):
    """Writes the backbone, its adapters and the head as msgpack.

    float64 arrays are stored raw, so a round trip is bit-exact.
    """
    state = {
        "version": CHECKPOINT_VERSION,
        "config_fingerprint": fingerprint,
        "kind": backbone.kind,
        "adapter_mode": backbone.adapter_mode,
        "rank": backbone.rank,
        "num_tokens": backbone.num_tokens,
        "specs": {
            str(i): {
                "name": spec.name,
                "kind": spec.kind,
                "in_dim": spec.in_dim,
                "out_dim": spec.out_dim,
                "activation": spec.activation,
            } for i, spec in enumerate(backbone.specs)
        },
        "frozen": _to_host(backbone.frozen),
        "adapters": {
            str(t): _to_host(adapter) for t, adapter in enumerate(backbone.adapters)
        },
        "head": {
            "kernel": np.asarray(head.kernel),
            "bias": np.asarray(head.bias),
            "class_ids": np.asarray(head.class_ids, dtype=np.int64),
            "class_tasks": np.asarray(head.class_tasks, dtype=np.int64),
        },
    }
    data = flax.serialization.msgpack_serialize(state)
    directory = os.path.dirname(path)
    if directory:
        tf.io.gfile.makedirs(directory)
    with tf.io.gfile.GFile(path, "wb") as f:
        f.write(data)
    logging.info("Saved checkpoint with %d adapters to %s.", backbone.num_tasks, path)


def load_checkpoint(
        path: str) -> Tuple[backbone_lib.Backbone, backbone_lib.Head, str]:
    """Reads a checkpoint written by `save_checkpoint`.

    Raises:
      DataFormatError: If the file is not a checkpoint of a known version.
    """
    with _open_existing(path, "rb") as f:
        data = f.read()
    try:
        state = flax.serialization.msgpack_restore(data)
    except Exception as e:  # pylint: disable=broad-except
        raise core.DataFormatError(f"{path}: not a checkpoint ({e}).") from e
    if not isinstance(state, dict) or state.get("version") != CHECKPOINT_VERSION:
        raise core.DataFormatError(f"{path}: unsupported checkpoint version.")
    specs = tuple(
        backbone_lib.LayerSpec(
            name=s["name"], kind=s["kind"], in_dim=int(s["in_dim"]),
            out_dim=int(s["out_dim"]), activation=s["activation"])
        for _, s in sorted(state["specs"].items(), key=lambda kv: int(kv[0])))
    adapters = tuple(
        jax.tree_util.tree_map(jax.numpy.asarray, adapter)
        for _, adapter in sorted(state["adapters"].items(), key=lambda kv: int(kv[0])))
    backbone = backbone_lib.Backbone(
        frozen=jax.tree_util.tree_map(jax.numpy.asarray, state["frozen"]),
        adapters=adapters,
        kind=state["kind"],
        specs=specs,
        adapter_mode=state["adapter_mode"],
        rank=int(state["rank"]),
        num_tokens=int(state["num_tokens"]))
    head_state = state["head"]
    head = backbone_lib.Head(
        kernel=jax.numpy.asarray(head_state["kernel"]),
        bias=jax.numpy.asarray(head_state["bias"]),
        class_ids=tuple(int(c) for c in head_state["class_ids"]),
        class_tasks=tuple(int(t) for t in head_state["class_tasks"]))
    return backbone, head, state["config_fingerprint"]


def write_accuracy_matrix(path: str, matrix: eval_metrics.AccuracyMatrix):
    _write_csv(path, ("stage", "task", "accuracy"),
               [(t, i, "%.2f" % value) for t, i, value in matrix.entries()])


def write_drift(path: str, drift: Sequence[float]):
    _write_csv(path, ("stage", "mean_sq_drift"),
               [(t, repr(float(value))) for t, value in enumerate(drift, start=1)])


def write_rank_diagnostics(path: str, rows: Sequence[Mapping[str, Any]]):
    _write_csv(path, RANK_DIAGNOSTICS_FIELDS,
               [[row[field] if not isinstance(row[field], float) else repr(row[field])
                 for field in RANK_DIAGNOSTICS_FIELDS] for row in rows])


def write_metrics(path: str, metrics: Mapping[str, Any]):
    write_text(path, json.dumps(metrics, sort_keys=True, indent=2) + "\n")


def read_metrics(run_dir: str) -> Dict[str, Any]:
    path = os.path.join(run_dir, METRICS)
    if not tf.io.gfile.exists(path):
        raise FileNotFoundError(f"{run_dir}: no {METRICS} found.")
    return json.loads(read_text(path))


def build_metrics(matrix: eval_metrics.AccuracyMatrix, drift: Sequence[float], *,
                  fingerprint: str, seed: int) -> Dict[str, Any]:
    """Everything `metrics.json` reports about one run."""
    old, new = eval_metrics.old_new_accuracy(matrix)
    return {
        "final_acc": eval_metrics.final_accuracy(matrix),
        "avg_acc": eval_metrics.average_accuracy(matrix),
        "bwt": eval_metrics.backward_transfer(matrix),
        "forgetting": eval_metrics.forgetting(matrix),
        "learning_acc": eval_metrics.learning_accuracy(matrix),
        "per_stage_acc": eval_metrics.per_stage_accuracy(matrix),
        "per_stage_old_acc": old,
        "per_stage_new_acc": new,
        "drift": [float(d) for d in drift],
        "final_drift": float(drift[-1]) if drift else None,
        "config_fingerprint": fingerprint,
        "seed": int(seed),
    }


def write_comparison(path: str, runs: Sequence[Tuple[str, Mapping[str, Any]]]):
    """One row per run: name, final_acc, avg_acc, bwt, final_drift."""
    _write_csv(path, ("name", "final_acc", "avg_acc", "bwt", "final_drift"),
               [(name, _format_real(m["final_acc"]), _format_real(m["avg_acc"]),
                 _format_real(m["bwt"]), _format_real(m.get("final_drift")))
                for name, m in runs])


def write_curves(out_dir: str, name: str, metrics: Mapping[str, Any]) -> List[str]:
    """Two-column `<stage> <value>` files for the drift and accuracy curves."""
    paths = []
    for suffix, values in (("drift_curve", metrics.get("drift", [])),
                           ("acc_curve", metrics["per_stage_acc"])):
        path = os.path.join(out_dir, f"{name}_{suffix}.dat")
        write_text(path, "".join(f"{t} {float(v)!r}\n"
                                 for t, v in enumerate(values, start=1)))
        paths.append(path)
    return paths


def new_class_accuracy(metrics: Mapping[str, Any]) -> float:
    """Accuracy on each task's own classes right after it, averaged over tasks."""
    return metrics["learning_acc"]


def summarize_runs(runs: Sequence[Mapping[str, Any]]) -> Dict[str, Tuple[float, float]]:
    """Mean and sample standard deviation of the ablation metrics."""
    summary = {}
    for name in SUMMARY_METRICS:
        if name == "new_class_acc":
            values = [new_class_accuracy(m) for m in runs]
        else:
            values = [m[name] for m in runs]
        values = np.asarray([np.nan if v is None else v for v in values], np.float64)
        std = float(np.std(values, ddof=1)) if values.size > 1 else 0.
        summary[name] = (float(np.mean(values)), std)
    return summary


def write_ablation_summary(path: str,
                           variants: Sequence[Tuple[str, Sequence[Mapping[str, Any]]]]):
    header = ["variant", "runs"]
    for name in SUMMARY_METRICS:
        header += [f"{name}_mean", f"{name}_std"]
    rows = []
    for variant, runs in variants:
        summary = summarize_runs(runs)
        row = [variant, len(runs)]
        for name in SUMMARY_METRICS:
            mean, std = summary[name]
            row += [repr(mean), repr(std)]
        rows.append(row)
    _write_csv(path, header, rows)
