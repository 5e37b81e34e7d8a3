# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0
from __future__ import annotations

import typing as t
from dataclasses import dataclass

import numpy as np

from skimread.compressor import AlignmentMatrix
from skimread.config import ModelConfig
from skimread.decoder import DecoderWeights, init_decoder
from skimread.encoder import EncoderWeights, init_encoder
from skimread.errors import DataError

if t.TYPE_CHECKING:
    from skimread.numerics import Tensor


@dataclass
class RamModel:
    """Encoder, decoder and alignment matrix trained together."""

    config: ModelConfig
    encoder: EncoderWeights
    decoder: DecoderWeights
    align: AlignmentMatrix

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.encoder.named_parameters("encoder"))
        params.update(self.decoder.named_parameters("decoder"))
        params["align.weight"] = self.align.weight
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: t.Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise DataError(f"checkpoint is missing {len(missing)} tensors, e.g. {min(missing)}")
        for name, param in params.items():
            value = np.asarray(state[name], dtype=param.data.dtype)
            if value.shape != param.shape:
                raise DataError(f"{name}: checkpoint shape {value.shape} != {param.shape}")
            param.data[...] = value

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


def init_model(config: ModelConfig | None = None, seed: int = 0) -> RamModel:
    config = config or ModelConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    return RamModel(
        config=config,
        encoder=init_encoder(config, rng),
        decoder=init_decoder(config, rng),
        align=AlignmentMatrix.identity(config.d_model),
    )
