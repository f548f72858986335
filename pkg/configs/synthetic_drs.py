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
"""A config for DRS continual learning on a synthetic 10-task stream."""

import ml_collections


def get_config():
    """Return config for 20 Gaussian classes, 2 per task, in 16 dimensions."""
    config = ml_collections.ConfigDict()
    config.seed = 0

    config.data = ml_collections.ConfigDict()
    # one of "synthetic", "csv", "idx"
    config.data.source = "synthetic"
    config.data.n_classes = 20
    config.data.classes_per_task = 2
    config.data.d_in = 16
    config.data.samples_per_class = 50
    config.data.spread = 0.3
    config.data.train_fraction = 0.8
    # share of the classes held out for pretraining (csv and idx only)
    config.data.pretrain_fraction = 0.
    config.data.csv_path = ""
    config.data.csv_test_path = ""
    config.data.label_column = -1
    config.data.skip_header = False
    config.data.train_images = ""
    config.data.train_labels = ""
    config.data.test_images = ""
    config.data.test_labels = ""

    config.model = ml_collections.ConfigDict()
    # "mlp" or "attention"
    config.model.backbone = "mlp"
    config.model.hidden_dim = 64
    config.model.embed_dim = 64
    config.model.num_layers = 3
    config.model.num_tokens = 4
    # "factored" (B A) or "full" (dense delta)
    config.model.adapter_mode = "factored"
    config.model.rank = 4

    config.pretrain = ml_collections.ConfigDict()
    config.pretrain.checkpoint = ""
    # pretrain W0 at the start of a run when no checkpoint is given
    config.pretrain.inline = True
    config.pretrain.learning_rate = 1e-3
    config.pretrain.batch_size = 32
    config.pretrain.patience = 3
    config.pretrain.max_epochs = 100

    config.drs = ml_collections.ConfigDict()
    config.drs.enabled = True
    config.drs.epsilon = 0.95
    # "subtracted" (W0 - V) or "pretrained" (W0)
    config.drs.source = "subtracted"
    config.drs.batch_size = 64

    config.loss = ml_collections.ConfigDict()
    config.loss.margin = 0.5
    config.loss.atl_weight = 0.1
    config.loss.atl_enabled = True

    config.train = ml_collections.ConfigDict()
    config.train.epochs_per_task = 30
    config.train.batch_size = 32
    config.train.learning_rate = 1e-3
    config.train.tensorboard = False

    return config
