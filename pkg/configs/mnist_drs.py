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
"""A config for DRS on split MNIST read from IDX files."""

from configs import synthetic_drs


def get_config():
    """Return config for 2 pretraining digits and 4 tasks of 2 digits."""
    config = synthetic_drs.get_config()
    config.data.source = "idx"
    config.data.train_images = "data/mnist/train-images-idx3-ubyte.gz"
    config.data.train_labels = "data/mnist/train-labels-idx1-ubyte.gz"
    config.data.test_images = "data/mnist/t10k-images-idx3-ubyte.gz"
    config.data.test_labels = "data/mnist/t10k-labels-idx1-ubyte.gz"
    config.data.pretrain_fraction = 0.2
    config.data.classes_per_task = 2

    config.model.hidden_dim = 128
    config.model.embed_dim = 64
    config.model.rank = 8

    config.train.epochs_per_task = 5
    config.train.batch_size = 128
    config.pretrain.batch_size = 128
    config.pretrain.max_epochs = 20
    return config
