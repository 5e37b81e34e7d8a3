# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

"""
Bidirectional encoder producing last-layer states for the query and for
every segment, each sequence encoded on its own.
"""
from __future__ import annotations

import logging
import math
import typing as t
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from skimread.errors import InvalidInputError
from skimread.layers import LayerWeights, block_forward, init_layer
from skimread.numerics import Tensor, layer_norm, parameter, take, tape_active

if t.TYPE_CHECKING:
    from skimread.config import ModelConfig
    from skimread.data import SegmentedExample

logger = logging.getLogger(__name__)


@dataclass
class EncoderWeights:
    token_embed: Tensor  # [V x d]
    pos_embed: Tensor  # [max_len x d]
    layers: list[LayerWeights]
    final_gain: Tensor
    final_bias: Tensor
    n_heads: int

    @property
    def vocab_size(self) -> int:
        return self.token_embed.shape[0]

    @property
    def d_model(self) -> int:
        return self.token_embed.shape[1]

    @property
    def max_len(self) -> int:
        return self.pos_embed.shape[0]

    def named_parameters(self, prefix: str = "encoder") -> t.Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.token_embed", self.token_embed
        yield f"{prefix}.pos_embed", self.pos_embed
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.layers.{i}")
        yield f"{prefix}.final_gain", self.final_gain
        yield f"{prefix}.final_bias", self.final_bias


def init_encoder(config: ModelConfig, rng: np.random.Generator) -> EncoderWeights:
    if config.d_model % config.n_heads:
        raise InvalidInputError("d_model must be divisible by n_heads")
    std = 1.0 / math.sqrt(config.d_model)
    return EncoderWeights(
        token_embed=parameter(rng.normal(0.0, std, (config.vocab_size, config.d_model))),
        pos_embed=parameter(rng.normal(0.0, std, (config.max_segment_len, config.d_model))),
        layers=[
            init_layer(rng, config.d_model, config.d_ff, config.n_layers)
            for _ in range(config.n_layers)
        ],
        final_gain=parameter(np.ones(config.d_model)),
        final_bias=parameter(np.zeros(config.d_model)),
        n_heads=config.n_heads,
    )


@dataclass
class HiddenStates:
    states: Tensor  # [L x d]
    source: str = ""

    def __len__(self) -> int:
        return self.states.shape[0]


def encode_sequence(
    tokens: t.Sequence[int], weights: EncoderWeights, source: str = ""
) -> HiddenStates:
    """Encode one sequence with full self-attention inside it.

    Positions restart at zero for every sequence.
    """
    length = len(tokens)
    if length == 0:
        raise InvalidInputError("empty sequence")
    if length > weights.max_len:
        raise InvalidInputError("sequence too long")
    if any(not 0 <= i < weights.vocab_size for i in tokens):
        raise InvalidInputError("bad token id")
    x = take(weights.token_embed, tokens) + weights.pos_embed[:length]
    for layer in weights.layers:
        x = block_forward(x, layer, weights.n_heads, causal=False)
    return HiddenStates(layer_norm(x, weights.final_gain, weights.final_bias), source)


def encode_parallel(
    example: SegmentedExample,
    weights: EncoderWeights,
    workers: int = 1,
) -> tuple[HiddenStates, list[HiddenStates]]:
    """Encode the query and every segment independently.

    With ``workers > 1`` segments are encoded on a thread pool; the result
    is identical to sequential encoding. Gradient tapes are thread-local,
    so workers are refused while a tape is recording.
    """
    if workers > 1 and tape_active():
        raise InvalidInputError("parallel encoding cannot record gradients")
    if len({len(s) for s in example.segments}) != 1:
        raise InvalidInputError("ragged segments")
    query = encode_sequence(example.query, weights, f"{example.id}:query")
    sources = [f"{example.id}:segment{i}" for i in range(example.n_segments)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            segments = list(
                pool.map(encode_sequence, example.segments, [weights] * len(sources), sources)
            )
    else:
        segments = [encode_sequence(s, weights, src) for s, src in zip(example.segments, sources)]
    logger.debug(
        "Encoded %s: %d segments of %d tokens", example.id, len(segments), example.segment_len
    )
    return query, segments
