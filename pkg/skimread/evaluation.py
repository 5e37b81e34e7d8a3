# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0
from __future__ import annotations

import logging
import typing as t
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from skimread.compressor import DEFAULT_TAU, achieved_ratio
from skimread.data import em_f1
from skimread.decoder import generate
from skimread.errors import InvalidInputError
from skimread.training import Mode, build_memory

if t.TYPE_CHECKING:
    from skimread.data import SegmentedExample
    from skimread.model import RamModel

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "rate",
    "mode",
    "em",
    "f1",
    "recall",
    "achieved_ratio",
    "mean_L_c",
    "n",
    "extrapolated",
)


def selection_recall(positives: t.Collection[int], retained: t.Collection[int]) -> float:
    """Share of positive segments that were read closely."""
    if not positives:
        raise InvalidInputError("no positive segments")
    return len(set(positives) & set(retained)) / len(set(positives))


@dataclass
class Outcome:
    id: str
    prediction: list[int]
    em: int
    f1: float
    recall: float | None
    memory_len: int
    context_len: int


@dataclass
class EvalResult:
    rate: float
    mode: str
    em: float
    f1: float
    recall: float | None
    achieved_ratio: float
    mean_L_c: float
    n: int
    extrapolated: bool = False

    def row(self) -> tuple[str, ...]:
        recall = "" if self.recall is None else f"{self.recall:.6f}"
        return (
            f"{self.rate:g}",
            self.mode,
            f"{self.em:.6f}",
            f"{self.f1:.6f}",
            recall,
            f"{self.achieved_ratio:.6f}",
            f"{self.mean_L_c:.4f}",
            str(self.n),
            str(int(self.extrapolated)),
        )


def evaluate_example(
    example: SegmentedExample,
    model: RamModel,
    alpha: float,
    mode: Mode | str = Mode.DEFAULT,
    tau: float = DEFAULT_TAU,
    max_answer_len: int = 8,
) -> Outcome:
    comp = build_memory(example, model, alpha, mode, tau)
    prediction = generate(comp.memory, example.query, model.decoder, max_answer_len)
    em, f1 = em_f1(prediction, example.answer)
    recall = selection_recall(example.positives, comp.plan.retained) if example.positives else None
    return Outcome(
        example.id, prediction, em, f1, recall, comp.memory.total_length, example.context_len
    )


def evaluate(
    model: RamModel,
    examples: t.Sequence[SegmentedExample],
    alpha: float,
    mode: Mode | str = Mode.DEFAULT,
    tau: float = DEFAULT_TAU,
    max_answer_len: int = 8,
    workers: int = 1,
    rate_pool: t.Collection[float] | None = None,
) -> EvalResult:
    """Greedy-decode every example at rate ``alpha`` and average the metrics.

    Examples are scored on up to ``workers`` threads; the aggregate does not
    depend on the worker count.
    """
    if not examples:
        raise InvalidInputError("no evaluation examples")
    mode = Mode(mode)
    extrapolated = rate_pool is not None and alpha not in rate_pool
    if extrapolated:
        logger.warning("Rate %g lies outside the training pool; result is extrapolated", alpha)

    def run(example: SegmentedExample) -> Outcome:
        return evaluate_example(example, model, alpha, mode, tau, max_answer_len)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, examples))
    else:
        outcomes = [run(example) for example in examples]

    n = len(outcomes)
    recalls = [o.recall for o in outcomes if o.recall is not None]
    mean_l_c = sum(o.memory_len for o in outcomes) / n
    result = EvalResult(
        rate=float(alpha),
        mode=mode.value,
        em=sum(o.em for o in outcomes) / n,
        f1=sum(o.f1 for o in outcomes) / n,
        recall=sum(recalls) / len(recalls) if recalls else None,
        achieved_ratio=achieved_ratio(sum(o.context_len for o in outcomes) / n, mean_l_c),
        mean_L_c=mean_l_c,
        n=n,
        extrapolated=extrapolated,
    )
    logger.info(
        "rate %g (%s): EM %.4f F1 %.4f over %d examples", alpha, mode.value, result.em, result.f1, n
    )
    return result
