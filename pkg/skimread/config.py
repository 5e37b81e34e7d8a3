# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

"""
Run configuration.

Configuration files are flat ``section.key = value`` text::

    # toy needle run
    model.d_model = 64
    train.rate_pool = 2,4,8,16,32
    seed = 7

Every key can also be overridden on the command line with
``--set section.key=value``.
"""
from __future__ import annotations

import hashlib
import logging
import os
import typing as t
from dataclasses import dataclass, field, fields, replace

from skimread.errors import ConfigError

if t.TYPE_CHECKING:
    from _typeshed import StrPath

logger = logging.getLogger(__name__)

MODES = ("default", "no_skimming", "no_close_reading", "ap_skimming", "no_contrastive")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_segment_len: int = 64
    max_context: int = 640

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"model.d_model={self.d_model} is not divisible by model.n_heads={self.n_heads}"
            )
        if min(self.vocab_size, self.d_model, self.n_layers, self.d_ff) < 1:
            raise ConfigError("model dimensions must be positive")


@dataclass(frozen=True)
class DataConfig:
    n_segments: int = 8
    segment_len: int = 16
    n_facts: int = 1
    positives: str = "required"
    summary_fraction: float = 0.0
    train_size: int = 4000
    eval_size: int = 500
    train_path: str = ""
    eval_path: str = ""

    def validate(self) -> None:
        if self.positives not in ("required", "answer"):
            raise ConfigError("data.positives must be 'required' or 'answer'")
        if not 1 <= self.n_facts <= self.n_segments:
            raise ConfigError("data.n_facts must lie in [1, data.n_segments]")


@dataclass(frozen=True)
class TrainConfig:
    rate_pool: tuple[float, ...] = (2.0, 4.0, 8.0, 16.0, 32.0)
    tau: float = 0.1
    learning_rate: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.999
    batch_size: int = 8
    steps: int = 3000
    mode: str = "default"
    seed: int = 0
    log_every: int = 10

    def validate(self) -> None:
        if not self.rate_pool:
            raise ConfigError("train.rate_pool must not be empty")
        if any(rate < 1 for rate in self.rate_pool):
            raise ConfigError("train.rate_pool entries must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {', '.join(MODES)}")
        if self.tau <= 0:
            raise ConfigError("train.tau must be positive")


@dataclass(frozen=True)
class EvalConfig:
    rates: tuple[float, ...] = (2.0, 4.0, 8.0, 16.0, 32.0)
    max_answer_len: int = 8
    workers: int = 1
    ablation_rate: float = 8.0


@dataclass(frozen=True)
class BenchConfig:
    rates: tuple[float, ...] = (2.0, 4.0, 8.0, 16.0, 32.0)
    n_segments: int = 32
    n_examples: int = 4
    repetitions: int = 20
    warmup: int = 3
    answer_len: int = 8


@dataclass(frozen=True)
class SweepConfig:
    segment_lens: tuple[int, ...] = (8, 16, 32)
    rate: float = 4.0


SECTIONS = ("model", "data", "train", "eval", "bench", "sweep")

# fields filled in from the run seed rather than set directly
DERIVED_KEYS = frozenset({"train.seed"})


@dataclass(frozen=True)
class RunConfig:
    subcommand: str = ""
    config_path: str = ""
    overrides: tuple[str, ...] = ()
    out_dir: str = "."
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def items(self) -> list[tuple[str, t.Any]]:
        pairs: list[tuple[str, t.Any]] = [("seed", self.seed)]
        for section in SECTIONS:
            block = getattr(self, section)
            for f in fields(block):
                key = f"{section}.{f.name}"
                if key not in DERIVED_KEYS:
                    pairs.append((key, getattr(block, f.name)))
        return pairs

    def dump(self) -> str:
        return "".join(f"{key} = {_render(value)}\n" for key, value in sorted(self.items()))

    def digest(self) -> str:
        return hashlib.sha224(self.dump().encode()).hexdigest()

    def header(self) -> dict[str, t.Any]:
        return {"config_digest": self.digest(), "seed": self.seed}

    def validate(self) -> None:
        self.model.validate()
        self.data.validate()
        self.train.validate()


def valid_keys() -> list[str]:
    return [key for key, _ in RunConfig().items()]


def _render(value: t.Any) -> str:
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str, default: t.Any) -> t.Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            item_type = type(default[0]) if default else float
            return tuple(item_type(part) for part in raw.split(",") if part.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return raw


def parse_pairs(lines: t.Iterable[str], source: str = "<config>") -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply_pairs(config: RunConfig, pairs: t.Iterable[tuple[str, str]]) -> RunConfig:
    known = dict(config.items())
    sections: dict[str, dict[str, t.Any]] = {}
    seed = config.seed
    for key, raw in pairs:
        if key not in known:
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid_keys())}")
        value = _coerce(key, raw, known[key])
        if key == "seed":
            seed = value
        else:
            section, name = key.split(".", 1)
            sections.setdefault(section, {})[name] = value
        logger.debug("config %s = %r", key, value)
    updates = {name: replace(getattr(config, name), **vals) for name, vals in sections.items()}
    return replace(config, seed=seed, **updates)


def load_config(
    path: StrPath | None = None,
    overrides: t.Sequence[str] = (),
    **fields_: t.Any,
) -> RunConfig:
    """Build a validated :class:`RunConfig` from a file plus overrides."""
    config = RunConfig(**fields_)
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf8") as fh:
            config = apply_pairs(config, parse_pairs(fh, str(path)))
        config = replace(config, config_path=str(path))
    config = apply_pairs(config, parse_pairs(overrides, "--set"))
    config = replace(config, overrides=tuple(overrides))
    # the trainer seed always follows the run seed
    config = replace(config, train=replace(config.train, seed=config.seed))
    config.validate()
    return config
