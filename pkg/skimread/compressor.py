# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

"""
Turns encoder states into a compression plan and a hybrid memory.

Segments ranked highest against the query are read closely, i.e. kept as
decoder word embeddings of their tokens. Every other segment is skimmed
into one query-weighted average of its token states, projected into the
decoder space by the alignment matrix.
"""
from __future__ import annotations

import logging
import math
import typing as t
from dataclasses import dataclass

import numpy as np

from skimread.errors import InvalidInputError
from skimread.numerics import (
    Tensor,
    concat,
    cosine_rows,
    mean_pool,
    parameter,
    softmax,
    stack,
    take,
)

if t.TYPE_CHECKING:
    from skimread.data import SegmentedExample, Tokenizer
    from skimread.encoder import HiddenStates

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.1


@dataclass
class AlignmentMatrix:
    weight: Tensor  # [d x d]

    @classmethod
    def identity(cls, d_model: int) -> AlignmentMatrix:
        return cls(parameter(np.eye(d_model) / math.sqrt(d_model)))

    @property
    def d_model(self) -> int:
        return self.weight.shape[0]

    def __call__(self, vector: Tensor) -> Tensor:
        return self.weight @ vector


@dataclass(frozen=True)
class CompressionPlan:
    probs: tuple[float, ...]
    cosines: tuple[float, ...]
    alpha: float
    k: int
    retained: tuple[int, ...]
    skimmed: tuple[int, ...]

    @property
    def n_segments(self) -> int:
        return len(self.probs)

    def action(self, index: int) -> str:
        return "close_read" if index in self.retained else "skim"

    def memory_length(self, segment_len: int, drop_skimmed: bool = False) -> int:
        return self.k * segment_len + (0 if drop_skimmed else len(self.skimmed))


@dataclass
class RetainedBlock:
    index: int
    token_ids: tuple[int, ...]
    embeddings: Tensor  # [L_seg x d]

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass
class SkimEntry:
    index: int
    vector: Tensor  # [d]

    @property
    def length(self) -> int:
        return 1


MemoryEntry = t.Union[RetainedBlock, SkimEntry]


@dataclass
class HybridMemory:
    entries: list[MemoryEntry]

    @property
    def total_length(self) -> int:
        return sum(entry.length for entry in self.entries)

    @property
    def retained(self) -> list[RetainedBlock]:
        return [e for e in self.entries if isinstance(e, RetainedBlock)]

    def rows(self) -> Tensor:
        """The ``[L_c x d]`` row sequence fed to the decoder."""
        if not self.entries:
            raise InvalidInputError("empty memory")
        parts = [
            e.embeddings if isinstance(e, RetainedBlock) else e.vector.reshape(1, -1)
            for e in self.entries
        ]
        return concat(parts, axis=0)

    def retained_tokens(self) -> list[int]:
        return [token for block in self.retained for token in block.token_ids]


def representative(states: HiddenStates, n_valid: int | None = None) -> Tensor:
    """Mean of the last hidden states, ignoring trailing pad positions."""
    rows = states.states
    if n_valid is not None and n_valid < rows.shape[0]:
        rows = rows[:n_valid]
    return mean_pool(rows)


def relevance_scores(r_q: Tensor, reps: t.Sequence[Tensor]) -> Tensor:
    """Cosine of the query representative against every segment."""
    if not reps:
        raise InvalidInputError("empty sequence")
    if not np.any(r_q.data):
        raise InvalidInputError("degenerate vector")
    for rep in reps:
        if not np.any(rep.data):
            raise InvalidInputError("degenerate segment")
    return cosine_rows(stack(reps), r_q)


def relevance(r_q: Tensor, reps: t.Sequence[Tensor], tau: float = DEFAULT_TAU) -> Tensor:
    return softmax(relevance_scores(r_q, reps), temperature=tau)


def budget(l_org: int, l_seg: int, alpha: float) -> int:
    """Number of segments to read closely, ``floor(L_org / (alpha * L_seg))``."""
    if alpha < 1:
        raise InvalidInputError("invalid rate")
    if l_seg < 1 or l_org < 0:
        raise InvalidInputError("segment length must be positive")
    n_segments = -(-l_org // l_seg)
    k = math.floor(l_org / (alpha * l_seg))
    return max(0, min(k, n_segments))


def select(probs: t.Sequence[float], k: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Top-k indices by probability; ties go to the lower index."""
    n = len(probs)
    if not 0 <= k <= n:
        raise InvalidInputError(f"k={k} outside [0, {n}]")
    order = sorted(range(n), key=lambda i: (-probs[i], i))
    retained = tuple(sorted(order[:k]))
    skimmed = tuple(i for i in range(n) if i not in retained)
    return retained, skimmed


def skim(
    states: HiddenStates,
    r_q: Tensor,
    n_valid: int | None = None,
    uniform: bool = False,
) -> Tensor:
    """Query-weighted average of token states (unit temperature).

    Zero token states score a cosine of -1. ``uniform`` replaces the
    query weights with plain average pooling.
    """
    rows = states.states
    if n_valid is not None and n_valid < rows.shape[0]:
        rows = rows[:n_valid]
    if rows.shape[0] == 0:
        raise InvalidInputError("empty sequence")
    if uniform:
        return mean_pool(rows)
    weights = softmax(cosine_rows(rows, r_q, fallback=-1.0))
    return weights @ rows


def plan_compression(
    r_q: Tensor,
    reps: t.Sequence[Tensor],
    alpha: float,
    context_len: int,
    segment_len: int,
    tau: float = DEFAULT_TAU,
    close_reading: bool = True,
) -> CompressionPlan:
    """Score segments and split them into close-read and skimmed sets.

    ``close_reading=False`` forces every segment to be skimmed.
    """
    cos = relevance_scores(r_q, reps)
    probs = softmax(cos, temperature=tau)
    p = tuple(float(x) for x in probs.data)
    k = budget(context_len, segment_len, alpha) if close_reading else 0
    k = min(k, len(reps))
    retained, skimmed = select(p, k)
    plan = CompressionPlan(
        probs=p,
        cosines=tuple(float(x) for x in cos.data),
        alpha=float(alpha),
        k=k,
        retained=retained,
        skimmed=skimmed,
    )
    logger.debug("Plan at rate %g: close-read %s, skim %d segments", alpha, retained, len(skimmed))
    return plan


def assemble(
    example: SegmentedExample,
    plan: CompressionPlan,
    skim_vectors: t.Mapping[int, Tensor],
    align: AlignmentMatrix,
    decoder_embed: Tensor,
    drop_skimmed: bool = False,
) -> HybridMemory:
    """Build the hybrid memory in original segment order.

    ``drop_skimmed`` leaves skimmed segments out entirely.
    """
    if plan.n_segments != example.n_segments:
        raise InvalidInputError("plan does not match example")
    if align.weight.shape != (decoder_embed.shape[1], decoder_embed.shape[1]):
        raise InvalidInputError(
            f"alignment matrix {align.weight.shape} does not match decoder width "
            f"{decoder_embed.shape[1]}"
        )
    retained = set(plan.retained)
    entries: list[MemoryEntry] = []
    for index, tokens in enumerate(example.segments):
        if index in retained:
            entries.append(RetainedBlock(index, tokens, take(decoder_embed, tokens)))
        elif not drop_skimmed:
            try:
                vector = skim_vectors[index]
            except KeyError:
                raise InvalidInputError(f"missing skim vector for segment {index}") from None
            if vector.shape != (align.d_model,):
                raise InvalidInputError("skim vector width does not match alignment matrix")
            entries.append(SkimEntry(index, align(vector)))
    return HybridMemory(entries)


def achieved_ratio(context_len: int, memory_len: int) -> float:
    return context_len / memory_len if memory_len else math.inf


def plan_report(
    example: SegmentedExample,
    plan: CompressionPlan,
    memory: HybridMemory,
    tokenizer: Tokenizer,
) -> dict[str, t.Any]:
    """Machine-readable view of which segments were read and which skimmed."""
    segments = []
    for index in range(plan.n_segments):
        record: dict[str, t.Any] = {
            "index": index,
            "prob": plan.probs[index],
            "cosine": plan.cosines[index],
            "action": plan.action(index),
        }
        if index in plan.retained:
            if example.segment_texts:
                record["text"] = example.segment_texts[index]
            else:
                record["text"] = tokenizer.decode(example.segments[index], skip_special=True)
        segments.append(record)
    return {
        "id": example.id,
        "alpha": plan.alpha,
        "k": plan.k,
        "segments": segments,
        "L_org": example.context_len,
        "L_c": memory.total_length,
        # an empty memory has no finite ratio
        "achieved_ratio": (
            achieved_ratio(example.context_len, memory.total_length)
            if memory.total_length
            else None
        ),
        "retained_text": [r["text"] for r in segments if "text" in r],
    }


def full_memory(example: SegmentedExample, decoder_embed: Tensor) -> HybridMemory:
    """Uncompressed memory: every segment kept as word embeddings."""
    return HybridMemory(
        [
            RetainedBlock(i, tokens, take(decoder_embed, tokens))
            for i, tokens in enumerate(example.segments)
        ]
    )
