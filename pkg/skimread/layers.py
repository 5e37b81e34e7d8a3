# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

"""
The pre-norm transformer block shared by the encoder and the decoder.
"""
from __future__ import annotations

import math
import typing as t
from dataclasses import dataclass, fields

import numpy as np

from skimread.numerics import Tensor, gelu, layer_norm, parameter, softmax

if t.TYPE_CHECKING:
    from numpy.random import Generator


@dataclass
class LayerWeights:
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_qkv: Tensor  # [d x 3d]
    b_qkv: Tensor
    w_out: Tensor  # [d x d]
    b_out: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_fc: Tensor  # [d x d_ff]
    b_fc: Tensor
    w_proj: Tensor  # [d_ff x d]
    b_proj: Tensor

    def named_parameters(self, prefix: str) -> t.Iterator[tuple[str, Tensor]]:
        for f in fields(self):
            yield f"{prefix}.{f.name}", getattr(self, f.name)


def init_layer(rng: Generator, d_model: int, d_ff: int, n_layers: int) -> LayerWeights:
    std = 1.0 / math.sqrt(d_model)
    # residual projections shrink with depth so the stack starts near identity
    out_std = std / math.sqrt(2 * n_layers)
    return LayerWeights(
        ln1_gain=parameter(np.ones(d_model)),
        ln1_bias=parameter(np.zeros(d_model)),
        w_qkv=parameter(rng.normal(0.0, std, (d_model, 3 * d_model))),
        b_qkv=parameter(np.zeros(3 * d_model)),
        w_out=parameter(rng.normal(0.0, out_std, (d_model, d_model))),
        b_out=parameter(np.zeros(d_model)),
        ln2_gain=parameter(np.ones(d_model)),
        ln2_bias=parameter(np.zeros(d_model)),
        w_fc=parameter(rng.normal(0.0, std, (d_model, d_ff))),
        b_fc=parameter(np.zeros(d_ff)),
        w_proj=parameter(rng.normal(0.0, out_std * math.sqrt(d_model / d_ff), (d_ff, d_model))),
        b_proj=parameter(np.zeros(d_model)),
    )


def _causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), -np.inf), k=1)


def attention(x: Tensor, layer: LayerWeights, n_heads: int, causal: bool) -> Tensor:
    length, width = x.shape
    head_dim = width // n_heads
    qkv = x @ layer.w_qkv + layer.b_qkv

    def heads(block: Tensor) -> Tensor:
        return block.reshape(length, n_heads, head_dim).transpose(1, 0, 2)

    q = heads(qkv[:, :width])
    k = heads(qkv[:, width : 2 * width])
    v = heads(qkv[:, 2 * width :])
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(head_dim))
    if causal:
        scores = scores + _causal_mask(length)
    weights = softmax(scores, axis=-1)
    mixed = (weights @ v).transpose(1, 0, 2).reshape(length, width)
    return mixed @ layer.w_out + layer.b_out


def mlp(x: Tensor, layer: LayerWeights) -> Tensor:
    return gelu(x @ layer.w_fc + layer.b_fc) @ layer.w_proj + layer.b_proj


def block_forward(x: Tensor, layer: LayerWeights, n_heads: int, causal: bool) -> Tensor:
    x = x + attention(layer_norm(x, layer.ln1_gain, layer.ln1_bias), layer, n_heads, causal)
    return x + mlp(layer_norm(x, layer.ln2_gain, layer.ln2_bias), layer)
