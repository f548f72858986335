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
"""Command-line entry point.

  python main.py pretrain --config configs/synthetic_drs.py --out w0.bin
  python main.py run --config configs/synthetic_drs.py --no-drs --out runs/ft
  python main.py ablate --config configs/synthetic_drs.py --seeds 5 --out abl
  python main.py drift --runs runs/drs runs/ft --out curves
  python main.py report --runs runs/drs runs/ft --out report

Any config field can also be set directly, e.g. `--config.drs.epsilon=0.9`; the
named flags below are shorthands for the common ones.

Exit codes: 0 on success, 2 for usage and configuration errors, 3 when a
numeric failure aborts training.
"""

import concurrent.futures
import dataclasses
import json
import os
import sys
from typing import Any, Dict, List, Sequence, Tuple

from absl import app
from absl import flags
from absl import logging
import ml_collections
from ml_collections import config_flags
import tensorflow as tf

from libml import core
from libml import eval_metrics
from libml import input_pipeline
from libml import utils
from models import backbone as backbone_lib
import train_continual


COMMANDS = ("pretrain", "run", "ablate", "drift", "report")
EXIT_USAGE = 2
EXIT_NUMERIC = 3
THREADS_ENV = "DRSCL_THREADS"

# (variant name, drs enabled, atl enabled, drs source)
ABLATION_VARIANTS = (
    ("drs_atl", True, True, "subtracted"),
    ("drs", True, False, "subtracted"),
    ("atl", False, True, "subtracted"),
    ("lora_ft", False, False, "subtracted"),
    ("drs_atl_pretrained_source", True, True, "pretrained"),
)

FLAGS = flags.FLAGS

config_flags.DEFINE_config_file(
    "config", None, "Path to a config file defining get_config().", lock_config=True)
flags.DEFINE_string("out", None, "Output checkpoint, run directory or report directory.")
flags.DEFINE_integer("seed", None, "Master seed; overrides config.seed.")
flags.DEFINE_bool("drs", None, "Enable the drift-resistant space (--nodrs disables).")
flags.DEFINE_bool("atl", None, "Enable the augmented triplet loss (--noatl disables).")
flags.DEFINE_enum("mode", None, ["factored", "full"], "Adapter mode.")
flags.DEFINE_enum("drs_source", None, ["subtracted", "pretrained"],
                  "Weights the drift-resistant space is computed under.")
flags.DEFINE_float("epsilon", None, "Retained-variance threshold in (0, 1].")
flags.DEFINE_float("lambda", None, "Weight of the triplet loss.")
flags.DEFINE_float("margin", None, "Triplet margin.")
flags.DEFINE_integer("rank", None, "Adapter rank.")
flags.DEFINE_string("checkpoint", None, "Pretrained W0 checkpoint for `run`.")
flags.DEFINE_integer("seeds", None, "Number of seeds for `ablate`.")
flags.DEFINE_list("runs", None, "Run directories for `drift` and `report`.")

# Alternative spellings accepted on the command line.
_FLAG_ALIASES = {
    "--no-drs": "--nodrs",
    "--no-atl": "--noatl",
    "--drs-source": "--drs_source",
}


def _rewrite_aliases(argv: Sequence[str]) -> List[str]:
    """Maps alias spellings and `--runs a b c` onto absl flag syntax."""
    rewritten = [argv[0]]
    runs = None
    for arg in argv[1:]:
        if runs is not None:
            if not arg.startswith("-"):
                runs.append(arg)
                continue
            rewritten.append("--runs=" + ",".join(runs))
            runs = None
        if arg == "--runs":
            runs = []
            continue
        name, sep, value = arg.partition("=")
        rewritten.append(_FLAG_ALIASES.get(name, name) + sep + value)
    if runs is not None:
        rewritten.append("--runs=" + ",".join(runs))
    return rewritten


def parse_flags(argv: Sequence[str]) -> List[str]:
    """Parses flags, exiting with the usage code on a bad flag value."""
    try:
        return FLAGS(_rewrite_aliases(argv))
    except (flags.Error, OSError) as e:
        sys.stderr.write(f"FATAL Flags parsing error: {e}\n")
        sys.exit(EXIT_USAGE)


def load_config() -> ml_collections.ConfigDict:
    """A private copy of the config named by --config."""
    if FLAGS.config is None:
        raise app.UsageError("--config is required.", exitcode=EXIT_USAGE)
    return FLAGS.config.copy_and_resolve_references()


def apply_overrides(config: ml_collections.ConfigDict) -> ml_collections.ConfigDict:
    """Flags given on the command line win over the config file."""
    overrides = (
        ("seed", ("seed",)),
        ("drs", ("drs", "enabled")),
        ("atl", ("loss", "atl_enabled")),
        ("mode", ("model", "adapter_mode")),
        ("drs_source", ("drs", "source")),
        ("epsilon", ("drs", "epsilon")),
        ("lambda", ("loss", "atl_weight")),
        ("margin", ("loss", "margin")),
        ("rank", ("model", "rank")),
        ("checkpoint", ("pretrain", "checkpoint")),
    )
    for flag_name, path in overrides:
        if not FLAGS[flag_name].present:
            continue
        section = config
        for key in path[:-1]:
            section = section[key]
        section[path[-1]] = FLAGS[flag_name].value
    return config


def _resolved_config() -> ml_collections.ConfigDict:
    config = apply_overrides(load_config())
    train_continual.validate_config(config)
    return config


def _require_out() -> str:
    if not FLAGS.out:
        raise app.UsageError("--out is required.", exitcode=EXIT_USAGE)
    return FLAGS.out


def pretrain_command() -> int:
    config = _resolved_config()
    out = FLAGS.out or config.pretrain.checkpoint
    if not out:
        raise app.UsageError("--out or pretrain.checkpoint is required.",
                             exitcode=EXIT_USAGE)
    seed = int(config.seed)
    stream = input_pipeline.create_task_stream(config, seed)
    result = train_continual.pretrain(stream, config, seed)
    utils.save_checkpoint(out, result.backbone,
                          backbone_lib.init_head(result.backbone.embed_dim),
                          utils.config_fingerprint(config))
    print(f"plateau_epoch={result.plateau_epoch}")
    print(f"pretrain_acc={result.accuracy!r}")
    return 0


def run_command() -> int:
    config = _resolved_config()
    out = _require_out()
    stream = input_pipeline.create_task_stream(config, int(config.seed))
    train_continual.run_experiment(stream, config, workdir=out)
    print(f"run_dir={out}")
    return 0


def ablation_configs(config: ml_collections.ConfigDict,
                     num_seeds: int) -> List[Tuple[str, int, ml_collections.ConfigDict]]:
    """The 5 ablation variants for each of `num_seeds` consecutive seeds."""
    runs = []
    for offset in range(num_seeds):
        seed = int(config.seed) + offset
        for name, drs_enabled, atl_enabled, source in ABLATION_VARIANTS:
            variant = ml_collections.ConfigDict(config.to_dict())
            variant.seed = seed
            variant.drs.enabled = drs_enabled
            variant.loss.atl_enabled = atl_enabled
            variant.drs.source = source
            runs.append((name, seed, variant))
    return runs


def _num_threads() -> int:
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            threads = int(value)
        except ValueError:
            raise app.UsageError(f"{THREADS_ENV} must be an integer, got {value!r}.",
                                 exitcode=EXIT_USAGE) from None
        return max(1, threads)
    return os.cpu_count() or 1


def ablate_command() -> int:
    config = _resolved_config()
    out = _require_out()
    if FLAGS.seeds is None or FLAGS.seeds < 2:
        raise app.UsageError("ablate needs --seeds N with N >= 2.", exitcode=EXIT_USAGE)
    runs = ablation_configs(config, FLAGS.seeds)

    # Data and W0 depend on the seed only, so every variant of a seed shares them.
    prepared = {}
    for _, seed, variant in runs:
        if seed not in prepared:
            stream = input_pipeline.create_task_stream(variant, seed)
            backbone = train_continual.prepare_backbone(stream, variant, seed)
            prepared[seed] = (stream, backbone)

    def execute(run: Tuple[str, int, ml_collections.ConfigDict]) -> Dict[str, Any]:
        name, seed, variant = run
        stream, backbone = prepared[seed]
        stream = dataclasses.replace(stream, access_log=[])
        workdir = os.path.join(out, name, f"seed_{seed}")
        train_continual.run_experiment(stream, variant, backbone=backbone,
                                       workdir=workdir)
        return utils.read_metrics(workdir)

    with concurrent.futures.ThreadPoolExecutor(max_workers=_num_threads()) as pool:
        results = list(pool.map(execute, runs))

    variants = []
    for name, *_ in ABLATION_VARIANTS:
        variants.append((name, [m for (n, _, _), m in zip(runs, results) if n == name]))
    path = os.path.join(out, utils.ABLATION_SUMMARY)
    utils.write_ablation_summary(path, variants)
    print(f"ablation_summary={path}")
    return 0


def _require_runs() -> List[str]:
    if not FLAGS.runs:
        raise app.UsageError("--runs is required.", exitcode=EXIT_USAGE)
    for run_dir in FLAGS.runs:
        if not tf.io.gfile.exists(os.path.join(run_dir, utils.METRICS)):
            raise app.UsageError(f"Run directory {run_dir} has no {utils.METRICS}.",
                                 exitcode=EXIT_USAGE)
    return FLAGS.runs


def _run_name(run_dir: str) -> str:
    return os.path.basename(os.path.normpath(run_dir))


def drift_command() -> int:
    """Recomputes the drift curve of finished runs from their checkpoints."""
    out = _require_out()
    for run_dir in _require_runs():
        config = ml_collections.ConfigDict(
            json.loads(utils.read_text(os.path.join(run_dir, utils.CONFIG_SNAPSHOT))))
        backbone, _, _ = utils.load_checkpoint(os.path.join(run_dir, utils.CHECKPOINT))
        stream = input_pipeline.create_task_stream(config, int(config.seed))
        task1 = stream.read_train(1, stage=backbone.num_tasks, purpose="drift")
        curve = eval_metrics.drift_curve(backbone, task1, stream.task(1).classes)
        name = _run_name(run_dir)
        utils.write_curves(out, name, {"drift": curve, "per_stage_acc":
                                       utils.read_metrics(run_dir)["per_stage_acc"]})
        print(f"{name} final_drift={curve[-1]!r}")
    return 0


def report_command() -> int:
    out = _require_out()
    runs = [(_run_name(d), utils.read_metrics(d)) for d in _require_runs()]
    utils.write_comparison(os.path.join(out, utils.COMPARISON), runs)
    for name, metrics in runs:
        utils.write_curves(out, name, metrics)
    print(f"comparison={os.path.join(out, utils.COMPARISON)}")
    return 0


_HANDLERS = {
    "pretrain": pretrain_command,
    "run": run_command,
    "ablate": ablate_command,
    "drift": drift_command,
    "report": report_command,
}


def main(argv: Sequence[str]) -> int:
    if len(argv) != 2 or argv[1] not in COMMANDS:
        raise app.UsageError(f"Expected exactly one command out of {COMMANDS}.",
                             exitcode=EXIT_USAGE)
    command = argv[1]
    try:
        return _HANDLERS[command]()
    except (core.ConfigurationError, core.DataFormatError, FileNotFoundError,
            tf.errors.NotFoundError) as e:
        raise app.UsageError(str(e), exitcode=EXIT_USAGE) from e
    except core.NumericalError as e:
        logging.error("Numeric failure during %s: %s", command, e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    app.run(main, flags_parser=parse_flags)
