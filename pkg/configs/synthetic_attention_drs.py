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
"""A config for DRS with adapters on the key and value maps of attention."""

from configs import synthetic_drs


def get_config():
    """Return the synthetic stream config with a single-head attention block."""
    config = synthetic_drs.get_config()
    config.model.backbone = "attention"
    config.model.embed_dim = 32
    config.model.num_tokens = 4
    return config
