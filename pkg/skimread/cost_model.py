# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

"""
Analytical FLOPs for compression and decoding, and a wall-clock bench.

A matrix product of ``[m x n] @ [n x p]`` counts ``2*m*n*p`` FLOPs.
Softmax, layer normalisation, GELU and residual additions are not
counted; they stay well under one percent at the shapes used here.
"""
from __future__ import annotations

import logging
import time
import typing as t
from dataclasses import dataclass, replace

import numpy as np

from skimread.compressor import budget, full_memory
from skimread.decoder import generate
from skimread.errors import InvalidInputError
from skimread.training import build_memory

if t.TYPE_CHECKING:
    from skimread.compressor import HybridMemory
    from skimread.data import SegmentedExample
    from skimread.model import RamModel

logger = logging.getLogger(__name__)

FLOPS_HEADER = "FLOPs from matrix products only; softmax and normalisation ignored"


def flops_matmul(m: int, n: int, p: int) -> int:
    return 2 * m * n * p


@dataclass(frozen=True)
class CostDims:
    L_org: int
    L_seg: int
    L_q: int
    L_a: int
    d: int
    n_layers: int
    n_heads: int
    V: int
    d_ff: int

    @property
    def n_segments(self) -> int:
        if self.L_seg < 1 or self.L_org < 1 or self.L_org % self.L_seg:
            raise InvalidInputError("inconsistent dims")
        return self.L_org // self.L_seg

    def memory_length(self, alpha: float) -> int:
        n = self.n_segments
        k = budget(self.L_org, self.L_seg, alpha)
        return k * self.L_seg + (n - k)


def attention_matrix_flops(length: int, d: int) -> int:
    """``QK^T`` plus ``AV`` for one bidirectional sequence."""
    return flops_matmul(length, d, length) + flops_matmul(length, length, d)


def projection_flops(length: int, d: int, d_ff: int) -> int:
    qkv_out = flops_matmul(length, d, 3 * d) + flops_matmul(length, d, d)
    mlp = flops_matmul(length, d, d_ff) + flops_matmul(length, d_ff, d)
    return qkv_out + mlp


def encode_flops(length: int, dims: CostDims) -> int:
    per_layer = attention_matrix_flops(length, dims.d) + projection_flops(length, dims.d, dims.d_ff)
    return dims.n_layers * per_layer


def query_attention_flops(dims: CostDims) -> int:
    # N dot products plus N+1 norms over d-wide representatives
    n = dims.n_segments
    return 4 * n * dims.d + 2 * dims.d


def flops_compression(dims: CostDims) -> int:
    """Parallel encoding of every segment and the query, plus scoring."""
    n = dims.n_segments
    segments = n * encode_flops(dims.L_seg, dims)
    return segments + encode_flops(dims.L_q, dims) + query_attention_flops(dims)


def flops_full_encoding(dims: CostDims) -> int:
    """The same stage with the whole context encoded as one segment."""
    return flops_compression(replace(dims, L_seg=dims.L_org))


def attention_flops_ratio(dims: CostDims) -> float:
    """Segment attention cost over full-sequence attention cost."""
    segmented = dims.n_segments * attention_matrix_flops(dims.L_seg, dims.d)
    return segmented / attention_matrix_flops(dims.L_org, dims.d)


def _token_flops(dims: CostDims) -> int:
    return dims.n_layers * projection_flops(1, dims.d, dims.d_ff)


def flops_decoding(L_c: int, L_q: int, L_a: int, dims: CostDims) -> int:
    """Cache-aware cost of generating ``L_a`` tokens after ``[memory; query; <bos>]``.

    The first step processes the whole prompt with causal attention; every
    later step adds one token attending over its prefix. Each step pays
    one output projection.
    """
    if L_a < 1:
        raise InvalidInputError("L_a must be at least 1")
    if min(L_c, L_q) < 0:
        raise InvalidInputError("lengths must be non-negative")
    d = dims.d
    head = flops_matmul(1, d, dims.V)
    prompt = L_c + L_q + 1
    # causal attention: row j attends to j keys, QK^T and AV cost 4*j*d
    total = prompt * _token_flops(dims) + dims.n_layers * 2 * d * prompt * (prompt + 1) + head
    for i in range(1, L_a):
        prefix = prompt + i
        total += _token_flops(dims) + dims.n_layers * 4 * prefix * d + head
    return total


@dataclass(frozen=True)
class FlopsReport:
    alpha: float
    L_org: int
    L_seg: int
    L_q: int
    L_c: int
    L_a: int
    d: int
    n_layers: int
    n_heads: int
    V: int
    flops_comp: int
    flops_decode_total: int
    baseline: int

    @property
    def flops_total(self) -> int:
        return self.flops_comp + self.flops_decode_total

    @property
    def ratio(self) -> float:
        return self.flops_total / self.baseline

    def row(self) -> dict[str, t.Any]:
        return {
            "alpha": f"{self.alpha:g}",
            "L_org": self.L_org,
            "L_seg": self.L_seg,
            "L_q": self.L_q,
            "L_c": self.L_c,
            "L_a": self.L_a,
            "d": self.d,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "V": self.V,
            "flops_comp": self.flops_comp,
            "flops_decode_total": self.flops_decode_total,
            "flops_total": self.flops_total,
            "baseline_full_context": self.baseline,
            "ratio": f"{self.ratio:.6f}",
        }


def flops_report(dims: CostDims, alpha: float) -> FlopsReport:
    """Compressed pipeline cost against decoding the uncompressed context."""
    l_c = dims.memory_length(alpha)
    return FlopsReport(
        alpha=float(alpha),
        L_org=dims.L_org,
        L_seg=dims.L_seg,
        L_q=dims.L_q,
        L_c=l_c,
        L_a=dims.L_a,
        d=dims.d,
        n_layers=dims.n_layers,
        n_heads=dims.n_heads,
        V=dims.V,
        flops_comp=flops_compression(dims),
        flops_decode_total=flops_decoding(l_c, dims.L_q, dims.L_a, dims),
        baseline=flops_decoding(dims.L_org, dims.L_q, dims.L_a, dims),
    )


@dataclass
class BenchRow:
    method: str
    rate: float
    L_c: float
    compression_latency: float
    inference_latency: float
    decode_flops: int

    @property
    def end_to_end_latency(self) -> float:
        return self.compression_latency + self.inference_latency

    def row(self) -> dict[str, t.Any]:
        return {
            "method": self.method,
            "rate": f"{self.rate:g}",
            "L_c": f"{self.L_c:g}",
            "compression_latency": f"{self.compression_latency:.6f}",
            "inference_latency": f"{self.inference_latency:.6f}",
            "end_to_end_latency": f"{self.end_to_end_latency:.6f}",
            "decode_flops": self.decode_flops,
        }


BENCH_COLUMNS = (
    "method",
    "rate",
    "L_c",
    "compression_latency",
    "inference_latency",
    "end_to_end_latency",
    "decode_flops",
)


def _median_time(fn: t.Callable[[], t.Any], repetitions: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return float(np.median(samples))


def dims_for(model: RamModel, example: SegmentedExample, answer_len: int) -> CostDims:
    cfg = model.config
    return CostDims(
        L_org=example.context_len,
        L_seg=example.segment_len,
        L_q=len(example.query),
        L_a=answer_len,
        d=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        V=cfg.vocab_size,
        d_ff=cfg.d_ff,
    )


def bench(
    model: RamModel,
    examples: t.Sequence[SegmentedExample],
    rate_grid: t.Sequence[float],
    repetitions: int = 20,
    warmup: int = 3,
    answer_len: int = 8,
) -> list[BenchRow]:
    """Median per-example latencies for every rate plus an uncompressed row.

    Decoding always runs ``answer_len`` steps so timings do not depend on
    when a model happens to emit end-of-sequence.
    """
    if not examples:
        raise InvalidInputError("no benchmark examples")
    if repetitions < 1:
        raise InvalidInputError("repetitions must be at least 1")
    n = len(examples)
    decoder = model.decoder
    rows = []

    baseline = [full_memory(ex, decoder.word_embed) for ex in examples]

    def decode_baseline() -> None:
        for ex, memory in zip(examples, baseline):
            generate(memory, ex.query, decoder, answer_len, stop_at_eos=False)

    rows.append(
        BenchRow(
            method="Original Prompt",
            rate=1.0,
            L_c=sum(m.total_length for m in baseline) / n,
            compression_latency=0.0,
            inference_latency=_median_time(decode_baseline, repetitions, warmup) / n,
            decode_flops=flops_decoding(
                examples[0].context_len,
                len(examples[0].query),
                answer_len,
                dims_for(model, examples[0], answer_len),
            ),
        )
    )

    for alpha in rate_grid:
        memories = [build_memory(ex, model, alpha).memory for ex in examples]

        def compress(alpha: float = alpha) -> None:
            for ex in examples:
                build_memory(ex, model, alpha)

        def decode(memories: list[HybridMemory] = memories) -> None:
            for ex, memory in zip(examples, memories):
                generate(memory, ex.query, decoder, answer_len, stop_at_eos=False)

        l_c = sum(m.total_length for m in memories) / n
        dims = dims_for(model, examples[0], answer_len)
        rows.append(
            BenchRow(
                method="RAM",
                rate=float(alpha),
                L_c=l_c,
                compression_latency=_median_time(compress, repetitions, warmup) / n,
                inference_latency=_median_time(decode, repetitions, warmup) / n,
                decode_flops=flops_decoding(memories[0].total_length, dims.L_q, answer_len, dims),
            )
        )
        logger.info(
            "bench rate %g: L_c %.1f, end-to-end %.4fs", alpha, l_c, rows[-1].end_to_end_latency
        )
    return rows
