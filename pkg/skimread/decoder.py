# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

"""
Causal decoder reading a hybrid memory, the query and the answer.
"""
from __future__ import annotations

import logging
import math
import typing as t
from dataclasses import dataclass

import numpy as np

from skimread.data import BOS_ID, EOS_ID
from skimread.errors import InvalidInputError
from skimread.layers import LayerWeights, block_forward, init_layer
from skimread.numerics import Tensor, concat, layer_norm, log_softmax, parameter, take

if t.TYPE_CHECKING:
    from skimread.compressor import HybridMemory
    from skimread.config import ModelConfig

logger = logging.getLogger(__name__)


@dataclass
class DecoderWeights:
    word_embed: Tensor  # [V x d]
    pos_embed: Tensor  # [max_context x d]
    layers: list[LayerWeights]
    final_gain: Tensor
    final_bias: Tensor
    out_proj: Tensor  # [d x V]
    n_heads: int

    @property
    def vocab_size(self) -> int:
        return self.word_embed.shape[0]

    @property
    def d_model(self) -> int:
        return self.word_embed.shape[1]

    @property
    def max_context(self) -> int:
        return self.pos_embed.shape[0]

    def named_parameters(self, prefix: str = "decoder") -> t.Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.word_embed", self.word_embed
        yield f"{prefix}.pos_embed", self.pos_embed
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.layers.{i}")
        yield f"{prefix}.final_gain", self.final_gain
        yield f"{prefix}.final_bias", self.final_bias
        yield f"{prefix}.out_proj", self.out_proj


def init_decoder(config: ModelConfig, rng: np.random.Generator) -> DecoderWeights:
    std = 1.0 / math.sqrt(config.d_model)
    return DecoderWeights(
        word_embed=parameter(rng.normal(0.0, std, (config.vocab_size, config.d_model))),
        pos_embed=parameter(rng.normal(0.0, std, (config.max_context, config.d_model))),
        layers=[
            init_layer(rng, config.d_model, config.d_ff, config.n_layers)
            for _ in range(config.n_layers)
        ],
        final_gain=parameter(np.ones(config.d_model)),
        final_bias=parameter(np.zeros(config.d_model)),
        out_proj=parameter(rng.normal(0.0, std, (config.d_model, config.vocab_size))),
        n_heads=config.n_heads,
    )


def _hidden(rows: Tensor, weights: DecoderWeights) -> Tensor:
    length = rows.shape[0]
    if length > weights.max_context:
        raise InvalidInputError("context overflow")
    x = rows + weights.pos_embed[:length]
    for layer in weights.layers:
        x = block_forward(x, layer, weights.n_heads, causal=True)
    return layer_norm(x, weights.final_gain, weights.final_bias)


def _input_rows(
    memory: HybridMemory,
    query_tokens: t.Sequence[int],
    tail: t.Sequence[int],
    weights: DecoderWeights,
) -> Tensor:
    parts = []
    if memory.total_length:
        parts.append(memory.rows())
    parts.append(take(weights.word_embed, list(query_tokens) + list(tail)))
    return concat(parts, axis=0)


def decode_forward(
    memory: HybridMemory,
    query_tokens: t.Sequence[int],
    answer_tokens: t.Sequence[int],
    weights: DecoderWeights,
) -> Tensor:
    """Teacher-forced logits ``[N_a x V]`` for ``answer_tokens``.

    The decoder reads ``[memory; query; <bos>, answer[:-1]]`` and position
    ids run consecutively over the whole row sequence.
    """
    if not answer_tokens:
        raise InvalidInputError("empty answer")
    shifted = [BOS_ID, *list(answer_tokens)[:-1]]
    rows = _input_rows(memory, query_tokens, shifted, weights)
    hidden = _hidden(rows, weights)
    return hidden[-len(answer_tokens) :] @ weights.out_proj


def nll(logits: Tensor, answer_tokens: t.Sequence[int]) -> Tensor:
    """Mean negative log-likelihood over answer positions."""
    n_answer = len(answer_tokens)
    if n_answer == 0:
        raise InvalidInputError("empty answer")
    if logits.shape[0] != n_answer:
        raise InvalidInputError("logits do not match answer length")
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(n_answer), np.asarray(answer_tokens, dtype=np.intp)]
    return -picked.mean()


def generate(
    memory: HybridMemory,
    query_tokens: t.Sequence[int],
    weights: DecoderWeights,
    max_len: int,
    stop_at_eos: bool = True,
) -> list[int]:
    """Greedy decoding; the end-of-sequence token is not returned."""
    if max_len < 1:
        raise InvalidInputError("max_len must be at least 1")
    produced: list[int] = []
    for _ in range(max_len):
        rows = _input_rows(memory, query_tokens, [BOS_ID, *produced], weights)
        logits = _hidden(rows, weights)[-1] @ weights.out_proj
        token = int(np.argmax(logits.data))
        if stop_at_eos and token == EOS_ID:
            break
        produced.append(token)
    return produced
