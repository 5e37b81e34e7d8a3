# SPDX-FileCopyrightText: 2015 Eric Larson, 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

from __future__ import annotations

import logging
import typing as t
from dataclasses import asdict, dataclass, field

import msgpack
import numpy as np

from skimread.config import ModelConfig
from skimread.errors import DataError
from skimread.model import init_model

if t.TYPE_CHECKING:
    from skimread.model import RamModel

logger = logging.getLogger(__name__)

_WIRE_DTYPE = np.dtype("<f8")


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, np.ndarray]
    meta: dict[str, t.Any] = field(default_factory=dict)

    def to_model(self) -> RamModel:
        model = init_model(self.config)
        model.load_state_dict(self.state)
        return model


def _pack_array(array: np.ndarray) -> dict[str, t.Any]:
    return {
        "shape": list(array.shape),
        "data": np.ascontiguousarray(array, dtype=_WIRE_DTYPE).tobytes(),
    }


def _unpack_array(packed: t.Mapping[str, t.Any]) -> np.ndarray:
    flat = np.frombuffer(packed["data"], dtype=_WIRE_DTYPE)
    return flat.reshape(tuple(packed["shape"])).astype(np.float64)


class Serializer:
    """Versioned msgpack codec for model checkpoints."""

    version = 1

    def dumps(self, model: RamModel, meta: t.Mapping[str, t.Any] | None = None) -> bytes:
        data = {
            "config": asdict(model.config),
            "tensors": {name: _pack_array(p.data) for name, p in model.parameters().items()},
            "meta": dict(meta or {}),
        }
        return b",".join([f"ram={self.version}".encode(), msgpack.dumps(data, use_bin_type=True)])

    def loads(self, data: bytes) -> Checkpoint | None:
        # Short circuit if we've been given an empty set of data
        if not data:
            return None

        try:
            ver, data = data.split(b",", 1)
        except ValueError:
            return None

        # A comma inside the payload is not a version marker
        if ver[:4] != b"ram=":
            return None

        ver_str = ver.split(b"=", 1)[-1].decode("ascii", "replace")

        try:
            loader = getattr(self, f"_loads_v{ver_str}")
        except AttributeError:
            # A version we can't read is treated like a missing checkpoint
            logger.debug("Unknown checkpoint version %r", ver_str)
            return None
        return loader(data)

    def _loads_v1(self, data: bytes) -> Checkpoint | None:
        try:
            cached = msgpack.loads(data, raw=False)
        except (ValueError, msgpack.UnpackException):
            return None

        try:
            config = ModelConfig(**cached["config"])
            state = {name: _unpack_array(v) for name, v in cached["tensors"].items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"corrupt checkpoint: {exc}") from None
        return Checkpoint(config, state, cached.get("meta", {}))
