# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

"""
Segmented examples, the synthetic needle task, JSONL ingestion and
answer scoring.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import string
import typing as t
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from skimread.errors import DataError, InvalidInputError

if t.TYPE_CHECKING:
    from _typeshed import StrPath

logger = logging.getLogger(__name__)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
QUERY_ID = 3
N_RESERVED = 4

SPECIAL_ATOMS = {"<pad>": PAD_ID, "<bos>": BOS_ID, "<eos>": EOS_ID, "<q>": QUERY_ID}

_CANONICAL = re.compile(r"^t(\d+)$")


class Tokenizer:
    """Whitespace tokenizer over a fixed vocabulary.

    ``t<id>`` atoms map to their own id; any other atom is hashed into the
    non-reserved range, so unrelated words may collide.
    """

    def __init__(self, vocab_size: int = 256) -> None:
        if vocab_size <= N_RESERVED:
            raise InvalidInputError("vocabulary too small")
        self.vocab_size = vocab_size
        self._names = {v: k for k, v in SPECIAL_ATOMS.items()}

    def atom_id(self, atom: str) -> int:
        if atom in SPECIAL_ATOMS:
            return SPECIAL_ATOMS[atom]
        match = _CANONICAL.match(atom)
        if match and N_RESERVED <= int(match.group(1)) < self.vocab_size:
            return int(match.group(1))
        digest = hashlib.blake2b(atom.encode("utf8"), digest_size=8).digest()
        return N_RESERVED + int.from_bytes(digest, "little") % (self.vocab_size - N_RESERVED)

    def encode(self, text: str) -> list[int]:
        return [self.atom_id(atom) for atom in text.split()]

    def decode(self, ids: t.Iterable[int], skip_special: bool = False) -> str:
        atoms = []
        for i in ids:
            if i in self._names:
                if skip_special:
                    continue
                atoms.append(self._names[i])
            else:
                atoms.append(f"t{i}")
        return " ".join(atoms)


def _trailing_pads(tokens: t.Sequence[int]) -> int:
    count = 0
    for token in reversed(tokens):
        if token != PAD_ID:
            break
        count += 1
    return count


@dataclass(frozen=True)
class SegmentedExample:
    id: str
    query: tuple[int, ...]
    segments: tuple[tuple[int, ...], ...]
    answer: tuple[int, ...]
    positives: tuple[int, ...] = ()
    query_text: str = ""
    segment_texts: tuple[str, ...] = ()
    answer_text: str = ""

    def __post_init__(self) -> None:
        if not self.segments:
            raise InvalidInputError("example needs at least one segment")
        if not self.query:
            raise InvalidInputError("empty query")
        if len({len(s) for s in self.segments}) != 1:
            raise InvalidInputError("ragged segments")
        if any(not 0 <= i < len(self.segments) for i in self.positives):
            raise InvalidInputError(f"positive index out of range in example {self.id}")

    @classmethod
    def from_tokens(
        cls,
        id: str,
        query: t.Sequence[int],
        context: t.Sequence[int],
        answer: t.Sequence[int],
        segment_len: int,
        positives: t.Iterable[int] = (),
        tokenizer: Tokenizer | None = None,
    ) -> SegmentedExample:
        """Chunk ``context`` into ``segment_len`` pieces, padding the last one."""
        if not context:
            raise InvalidInputError("empty sequence")
        segments = []
        for start in range(0, len(context), segment_len):
            chunk = [int(i) for i in context[start : start + segment_len]]
            chunk += [PAD_ID] * (segment_len - len(chunk))
            segments.append(tuple(chunk))
        tok = tokenizer or Tokenizer()
        return cls(
            id=id,
            query=tuple(query),
            segments=tuple(segments),
            answer=tuple(answer),
            positives=tuple(sorted(set(positives))),
            query_text=tok.decode(query),
            segment_texts=tuple(tok.decode(s, skip_special=True) for s in segments),
            answer_text=tok.decode(answer),
        )

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    @property
    def segment_len(self) -> int:
        return len(self.segments[0])

    @property
    def context_len(self) -> int:
        return self.n_segments * self.segment_len

    @property
    def valid_lengths(self) -> tuple[int, ...]:
        """Non-pad token count of each segment."""
        return tuple(max(1, len(s) - _trailing_pads(s)) for s in self.segments)

    @property
    def has_positives(self) -> bool:
        return bool(self.positives)

    def to_dict(self) -> dict[str, t.Any]:
        data = asdict(self)
        data["segments"] = [list(s) for s in self.segments]
        for key in ("query", "answer", "positives", "segment_texts"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: t.Mapping[str, t.Any]) -> SegmentedExample:
        try:
            return cls(
                id=str(data["id"]),
                query=tuple(int(i) for i in data["query"]),
                segments=tuple(tuple(int(i) for i in s) for s in data["segments"]),
                answer=tuple(int(i) for i in data["answer"]),
                positives=tuple(int(i) for i in data.get("positives", ())),
                query_text=data.get("query_text", ""),
                segment_texts=tuple(data.get("segment_texts", ())),
                answer_text=data.get("answer_text", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed example: {exc}") from None


def dumps_example(example: SegmentedExample) -> str:
    return json.dumps(example.to_dict(), separators=(",", ":"))


def loads_example(line: str) -> SegmentedExample:
    try:
        data = json.loads(line)
    except ValueError as exc:
        raise DataError(f"malformed example: {exc}") from None
    if not isinstance(data, dict):
        raise DataError("malformed example: expected a JSON object")
    return SegmentedExample.from_dict(data)


def write_examples(path: StrPath, examples: t.Iterable[SegmentedExample]) -> None:
    with open(path, "w", encoding="utf8") as fh:
        for example in examples:
            fh.write(dumps_example(example) + "\n")


def read_examples(path: StrPath) -> list[SegmentedExample]:
    examples = []
    with open(path, encoding="utf8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                examples.append(loads_example(line))
            except (DataError, InvalidInputError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not examples:
        raise DataError(f"{path}: no examples")
    return examples


@dataclass(frozen=True)
class NeedleVocab:
    """Disjoint id ranges used by the synthetic tasks."""

    vocab_size: int = 256
    keys: range = field(init=False)
    values: range = field(init=False)
    fillers: range = field(init=False)

    def __post_init__(self) -> None:
        usable = self.vocab_size - N_RESERVED
        if usable < 12:
            raise InvalidInputError("vocabulary too small for the needle task")
        quarter = usable // 4
        object.__setattr__(self, "keys", range(N_RESERVED, N_RESERVED + quarter))
        object.__setattr__(self, "values", range(N_RESERVED + quarter, N_RESERVED + 2 * quarter))
        object.__setattr__(self, "fillers", range(N_RESERVED + 2 * quarter, self.vocab_size))


def _plant(
    rng: np.random.Generator,
    n_segments: int,
    segment_len: int,
    vocab: NeedleVocab,
) -> list[list[int]]:
    fillers = np.asarray(vocab.fillers)
    return [[int(i) for i in rng.choice(fillers, size=segment_len)] for _ in range(n_segments)]


def make_needle(
    seed: int,
    n_segments: int,
    segment_len: int,
    n_facts: int = 1,
    vocab_size: int = 256,
    positives: str = "required",
    tokenizer: Tokenizer | None = None,
) -> SegmentedExample:
    """Plant key/value facts in distinct segments and ask for one value.

    With two or more facts the first two form a chain: the queried key
    points to a bridge key whose fact holds the answer. Remaining facts are
    decoys. ``positives="answer"`` keeps only the answer-holding segment.
    """
    if not 1 <= n_facts <= n_segments:
        raise InvalidInputError("n_facts must lie in [1, N]")
    if segment_len < 2:
        raise InvalidInputError("segments must hold at least one fact")
    vocab = NeedleVocab(vocab_size)
    rng = np.random.default_rng(seed)
    segments = _plant(rng, n_segments, segment_len, vocab)
    holders = [int(i) for i in rng.choice(n_segments, size=n_facts, replace=False)]
    keys = [int(k) for k in rng.choice(np.asarray(vocab.keys), size=n_facts + 1, replace=False)]
    values = [int(v) for v in rng.choice(np.asarray(vocab.values), size=n_facts, replace=False)]

    hops = min(n_facts, 2)
    facts = []
    if hops == 1:
        facts.append((keys[0], values[0]))
    else:
        facts.append((keys[0], keys[n_facts]))
        facts.append((keys[n_facts], values[0]))
    facts.extend((keys[i], values[i]) for i in range(hops, n_facts))

    for holder, (key, value) in zip(holders, facts):
        offset = int(rng.integers(0, segment_len - 1))
        segments[holder][offset] = key
        segments[holder][offset + 1] = value

    answer = (values[0],)
    required = holders[:hops]
    chosen = required if positives == "required" else required[-1:]
    tok = tokenizer or Tokenizer(vocab_size)
    context = [token for segment in segments for token in segment]
    return SegmentedExample.from_tokens(
        id=f"needle-{seed}",
        query=(QUERY_ID, keys[0]),
        context=context,
        answer=answer,
        segment_len=segment_len,
        positives=chosen,
        tokenizer=tok,
    )


def make_summary(
    seed: int,
    n_segments: int,
    segment_len: int,
    n_facts: int = 2,
    vocab_size: int = 256,
    tokenizer: Tokenizer | None = None,
) -> SegmentedExample:
    """A summarisation-style example: recite the planted markers in order.

    These examples carry no positive segments and train the NLL term only.
    """
    if not 1 <= n_facts <= n_segments:
        raise InvalidInputError("n_facts must lie in [1, N]")
    vocab = NeedleVocab(vocab_size)
    rng = np.random.default_rng(seed)
    segments = _plant(rng, n_segments, segment_len, vocab)
    holders = sorted(int(i) for i in rng.choice(n_segments, size=n_facts, replace=False))
    markers = [int(v) for v in rng.choice(np.asarray(vocab.values), size=n_facts, replace=False)]
    for holder, marker in zip(holders, markers):
        segments[holder][int(rng.integers(0, segment_len))] = marker
    context = [token for segment in segments for token in segment]
    return SegmentedExample.from_tokens(
        id=f"summary-{seed}",
        query=(QUERY_ID,),
        context=context,
        answer=markers,
        segment_len=segment_len,
        tokenizer=tokenizer or Tokenizer(vocab_size),
    )


def make_dataset(
    seed: int,
    size: int,
    n_segments: int,
    segment_len: int,
    n_facts: int = 1,
    vocab_size: int = 256,
    positives: str = "required",
    summary_fraction: float = 0.0,
) -> list[SegmentedExample]:
    """Deterministic mix of needle and summary examples.

    Example seeds are drawn from ``seed`` so that train and eval sets built
    from different seeds do not share examples by accident.
    """
    example_seeds = np.random.SeedSequence(seed).generate_state(size)
    kinds = np.random.default_rng(seed).random(size) < summary_fraction
    tok = Tokenizer(vocab_size)
    examples = []
    for example_seed, is_summary in zip(example_seeds, kinds):
        if is_summary:
            example = make_summary(
                int(example_seed),
                n_segments,
                segment_len,
                min(max(n_facts, 2), n_segments),
                vocab_size,
                tok,
            )
        else:
            example = make_needle(
                int(example_seed), n_segments, segment_len, n_facts, vocab_size, positives, tok
            )
        examples.append(example)
    return examples


def positions_to_segments(
    spans: t.Iterable[tuple[int, int]],
    segment_len: int,
    doc_len: int | None = None,
) -> tuple[int, ...]:
    """Map inclusive token spans to the indices of every overlapping segment."""
    indices: set[int] = set()
    for start, end in spans:
        if start < 0 or end < start or (doc_len is not None and end >= doc_len):
            raise InvalidInputError(f"span ({start}, {end}) outside the document")
        indices.update(range(start // segment_len, end // segment_len + 1))
    if not indices:
        logger.warning("No answer spans given; example has no positive segments")
    return tuple(sorted(indices))


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _as_text(tokens: str | t.Sequence[int]) -> str:
    if isinstance(tokens, str):
        return tokens
    return " ".join(f"t{int(i)}" for i in tokens if i not in (PAD_ID, BOS_ID, EOS_ID))


def em_f1(prediction: str | t.Sequence[int], reference: str | t.Sequence[int]) -> tuple[int, float]:
    """Exact match and token F1 over normalised bags of tokens."""
    ref = normalize_answer(_as_text(reference)).split()
    if not ref:
        raise InvalidInputError("empty reference")
    pred = normalize_answer(_as_text(prediction)).split()
    if not pred:
        return 0, 0.0
    em = int(pred == ref)
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return em, 0.0
    precision = overlap / len(pred)
    recall = overlap / len(ref)
    return em, 2 * precision * recall / (precision + recall)
