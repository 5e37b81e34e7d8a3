# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

"""
Joint training of the language-modelling and contrastive objectives.

Every example draws its own compression rate from the rate pool, so one
run serves every rate. The top-k plan is computed from the current
weights and then held fixed while gradients flow through the memory.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import logging
import math
import time
import typing as t
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from skimread.compressor import (
    DEFAULT_TAU,
    CompressionPlan,
    HybridMemory,
    assemble,
    plan_compression,
    relevance_scores,
    representative,
    skim,
)
from skimread.data import EOS_ID
from skimread.decoder import decode_forward, nll
from skimread.encoder import encode_parallel
from skimread.errors import InvalidInputError, NumericalError
from skimread.numerics import GradTape, Tensor, log_softmax

if t.TYPE_CHECKING:
    from _typeshed import StrPath

    from skimread.config import TrainConfig
    from skimread.data import SegmentedExample
    from skimread.encoder import HiddenStates
    from skimread.model import RamModel

logger = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    DEFAULT = "default"
    NO_SKIMMING = "no_skimming"
    NO_CLOSE_READING = "no_close_reading"
    AP_SKIMMING = "ap_skimming"
    NO_CONTRASTIVE = "no_contrastive"


@dataclass
class MemoryInputs:
    plan: CompressionPlan
    skim_vectors: dict[int, Tensor]
    drop_skimmed: bool = False


def apply_mode(
    plan: CompressionPlan,
    segment_states: t.Sequence[HiddenStates],
    r_q: Tensor,
    mode: Mode | str = Mode.DEFAULT,
    valid_lengths: t.Sequence[int] | None = None,
) -> MemoryInputs:
    """Adjust the plan and skim vectors for an ablation mode."""
    mode = Mode(mode)
    if mode is Mode.NO_SKIMMING:
        return MemoryInputs(plan, {}, drop_skimmed=True)
    if mode is Mode.NO_CLOSE_READING and plan.retained:
        plan = replace(plan, k=0, retained=(), skimmed=tuple(range(plan.n_segments)))
    uniform = mode is Mode.AP_SKIMMING
    vectors = {
        i: skim(
            segment_states[i],
            r_q,
            n_valid=valid_lengths[i] if valid_lengths else None,
            uniform=uniform,
        )
        for i in plan.skimmed
    }
    return MemoryInputs(plan, vectors)


@dataclass
class Compression:
    r_q: Tensor
    reps: list[Tensor]
    plan: CompressionPlan
    memory: HybridMemory


def build_memory(
    example: SegmentedExample,
    model: RamModel,
    alpha: float,
    mode: Mode | str = Mode.DEFAULT,
    tau: float = DEFAULT_TAU,
    plan: CompressionPlan | None = None,
    workers: int = 1,
) -> Compression:
    """Encode, plan and assemble the hybrid memory for one example.

    Passing ``plan`` reuses a previous selection instead of recomputing it.
    """
    mode = Mode(mode)
    query_states, segment_states = encode_parallel(example, model.encoder, workers=workers)
    valid = example.valid_lengths
    r_q = representative(query_states)
    reps = [representative(s, n) for s, n in zip(segment_states, valid)]
    if plan is None:
        plan = plan_compression(
            r_q,
            reps,
            alpha,
            example.context_len,
            example.segment_len,
            tau,
            close_reading=mode is not Mode.NO_CLOSE_READING,
        )
    inputs = apply_mode(plan, segment_states, r_q, mode, valid)
    memory = assemble(
        example,
        inputs.plan,
        inputs.skim_vectors,
        model.align,
        model.decoder.word_embed,
        drop_skimmed=inputs.drop_skimmed,
    )
    return Compression(r_q, reps, inputs.plan, memory)


def contrastive_loss(
    r_q: Tensor,
    reps: t.Sequence[Tensor],
    positives: t.Collection[int],
    tau: float = DEFAULT_TAU,
) -> Tensor:
    """Mean negative log-probability of the positive segments.

    An empty positive set contributes nothing.
    """
    if not positives:
        return Tensor(0.0)
    if any(not 0 <= i < len(reps) for i in positives):
        raise InvalidInputError("invalid positive index")
    logp = log_softmax(relevance_scores(r_q, reps) * (1.0 / tau))
    return -logp[np.asarray(sorted(positives), dtype=np.intp)].mean()


def total_loss(nll_term: Tensor, con_term: Tensor, mode: Mode | str = Mode.DEFAULT) -> Tensor:
    if Mode(mode) is Mode.NO_CONTRASTIVE:
        return nll_term
    return nll_term + con_term


@dataclass
class LossBreakdown:
    total: Tensor
    nll: Tensor
    con: Tensor
    plan: CompressionPlan


def example_loss(
    example: SegmentedExample,
    model: RamModel,
    alpha: float,
    mode: Mode | str = Mode.DEFAULT,
    tau: float = DEFAULT_TAU,
    plan: CompressionPlan | None = None,
) -> LossBreakdown:
    mode = Mode(mode)
    comp = build_memory(example, model, alpha, mode, tau, plan)
    target = [*example.answer, EOS_ID]
    logits = decode_forward(comp.memory, example.query, target, model.decoder)
    nll_term = nll(logits, target)
    if mode is Mode.NO_CONTRASTIVE:
        con_term = Tensor(0.0)
    else:
        if not example.has_positives:
            logger.debug("Example %s has no positive segments; NLL only", example.id)
        con_term = contrastive_loss(comp.r_q, comp.reps, example.positives, tau)
    return LossBreakdown(total_loss(nll_term, con_term, mode), nll_term, con_term, comp.plan)


class Adam:
    """Adaptive-moment optimiser with a linear learning-rate decay.

    ``beta1=0`` drops the first-moment average (no momentum).
    """

    def __init__(
        self,
        params: t.Mapping[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.0,
        beta2: float = 0.999,
        eps: float = 1e-8,
        total_steps: int | None = None,
    ) -> None:
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.total_steps = total_steps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def lr_at(self, step: int) -> float:
        if not self.total_steps:
            return self.lr
        return self.lr * max(0.0, 1.0 - step / self.total_steps)

    def step(self, grads: t.Mapping[str, np.ndarray]) -> None:
        lr = self.lr_at(self.t)
        self.t += 1
        for name, param in self.params.items():
            grad = grads[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * grad * grad
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            param.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class StepResult:
    step: int
    loss: float
    loss_nll: float
    loss_con: float
    alphas: list[float]
    flagged: list[str] = field(default_factory=list)


def train_step(
    batch: t.Sequence[SegmentedExample],
    model: RamModel,
    optimizer: Adam,
    config: TrainConfig,
    rng: np.random.Generator,
    step: int = 0,
) -> StepResult:
    """One update over ``batch``; gradients are averaged across examples."""
    params = model.parameters()
    names = list(params)
    tensors = [params[n] for n in names]
    summed = [np.zeros_like(p.data) for p in tensors]
    mode = Mode(config.mode)
    result = StepResult(step, 0.0, 0.0, 0.0, [])
    for example in batch:
        alpha = float(rng.choice(np.asarray(config.rate_pool, dtype=float)))
        with GradTape() as tape:
            parts = example_loss(example, model, alpha, mode, config.tau)
        loss = float(parts.total.data)
        if not math.isfinite(loss):
            raise NumericalError(
                f"non-finite loss {loss} at step {step}, example {example.id}, rate {alpha:g}"
            )
        for acc, grad in zip(summed, tape.gradient(parts.total, tensors)):
            acc += grad
        result.alphas.append(alpha)
        result.loss += loss
        result.loss_nll += float(parts.nll.data)
        result.loss_con += float(parts.con.data)
        if mode is not Mode.NO_CONTRASTIVE and not example.has_positives:
            result.flagged.append(example.id)
    n = len(batch)
    optimizer.step({name: acc / n for name, acc in zip(names, summed)})
    result.loss /= n
    result.loss_nll /= n
    result.loss_con /= n
    return result


def alpha_histogram(alphas: t.Iterable[float]) -> str:
    counts = Counter(alphas)
    return "|".join(f"{rate:g}:{counts[rate]}" for rate in sorted(counts))


@dataclass
class TrainResult:
    history: list[StepResult]
    order_digest: str

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.history]


LOG_COLUMNS = ("step", "loss_nll", "loss_con", "alpha_histogram", "wall_time")


class Trainer:
    """Runs ``train_step`` over shuffled batches and writes a CSV log."""

    def __init__(
        self,
        model: RamModel,
        config: TrainConfig,
        log_path: StrPath | None = None,
        header: t.Mapping[str, t.Any] | None = None,
    ) -> None:
        config.validate()
        self.model = model
        self.config = config
        self.log_path = log_path
        self.header = dict(header or {})
        self.optimizer = Adam(
            model.parameters(),
            lr=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            total_steps=config.steps,
        )

    def batches(
        self, examples: t.Sequence[SegmentedExample], steps: int
    ) -> t.Iterator[list[SegmentedExample]]:
        rng = np.random.default_rng(self.config.seed)
        order: list[int] = []
        size = self.config.batch_size
        for _ in range(steps):
            while len(order) < size:
                order.extend(int(i) for i in rng.permutation(len(examples)))
            batch, order = order[:size], order[size:]
            yield [examples[i] for i in batch]

    def fit(self, examples: t.Sequence[SegmentedExample], steps: int | None = None) -> TrainResult:
        if not examples:
            raise InvalidInputError("no training examples")
        steps = self.config.steps if steps is None else steps
        rate_rng = np.random.default_rng([self.config.seed, 1])
        digest = hashlib.sha224()
        history: list[StepResult] = []
        window_alphas: list[float] = []
        flagged = 0
        start = time.perf_counter()
        rows = []
        for step, batch in enumerate(self.batches(examples, steps)):
            for example in batch:
                digest.update(example.id.encode() + b"\n")
            result = train_step(batch, self.model, self.optimizer, self.config, rate_rng, step)
            history.append(result)
            window_alphas.extend(result.alphas)
            flagged += len(result.flagged)
            if (step + 1) % self.config.log_every == 0 or step + 1 == steps:
                rows.append(
                    (
                        step + 1,
                        f"{result.loss_nll:.6f}",
                        f"{result.loss_con:.6f}",
                        alpha_histogram(window_alphas),
                        f"{time.perf_counter() - start:.3f}",
                    )
                )
                logger.info(
                    "step %d/%d loss %.4f (nll %.4f, con %.4f)",
                    step + 1,
                    steps,
                    result.loss,
                    result.loss_nll,
                    result.loss_con,
                )
                window_alphas = []
        if flagged:
            logger.warning("%d training examples had no positive segments (NLL only)", flagged)
        if self.log_path is not None:
            self.write_log(rows)
        return TrainResult(history, digest.hexdigest())

    def write_log(self, rows: t.Iterable[t.Sequence[t.Any]]) -> None:
        with open(self.log_path, "w", newline="", encoding="utf8") as fh:  # type: ignore[arg-type]
            if self.header:
                fh.write("# " + " ".join(f"{k}={v}" for k, v in self.header.items()) + "\n")
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            writer.writerows(rows)
