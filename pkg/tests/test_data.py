# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

import logging

import pytest

from skimread.data import (
    EOS_ID,
    PAD_ID,
    QUERY_ID,
    NeedleVocab,
    SegmentedExample,
    Tokenizer,
    em_f1,
    loads_example,
    make_dataset,
    make_needle,
    make_summary,
    normalize_answer,
    positions_to_segments,
    read_examples,
    write_examples,
)
from skimread.errors import DataError, InvalidInputError


class TestTokenizer:
    def setup_method(self):
        self.tok = Tokenizer(64)

    def test_canonical_atoms(self):
        assert self.tok.encode("t5 t63 <eos>") == [5, 63, EOS_ID]

    def test_hashed_atoms_stay_in_range(self):
        ids = self.tok.encode("the quick brown fox t64 t2")
        assert all(4 <= i < 64 for i in ids)
        assert self.tok.encode("fox") == self.tok.encode("fox")

    def test_decode(self):
        assert self.tok.decode([QUERY_ID, 9, PAD_ID]) == "<q> t9 <pad>"
        assert self.tok.decode([QUERY_ID, 9, PAD_ID], skip_special=True) == "t9"

    def test_too_small(self):
        with pytest.raises(InvalidInputError):
            Tokenizer(4)


class TestSegmentedExample:
    def test_from_tokens_pads_last_segment(self):
        example = SegmentedExample.from_tokens("x", [3, 4], list(range(5, 15)), [7], 4)
        assert example.n_segments == 3
        assert example.segments[-1] == (13, 14, PAD_ID, PAD_ID)
        assert example.valid_lengths == (4, 4, 2)
        assert example.context_len == 12

    def test_empty_context(self):
        with pytest.raises(InvalidInputError, match="empty sequence"):
            SegmentedExample.from_tokens("x", [3], [], [7], 4)

    def test_empty_query(self):
        with pytest.raises(InvalidInputError):
            SegmentedExample(id="x", query=(), segments=((5,),), answer=(7,))

    def test_positive_out_of_range(self):
        with pytest.raises(InvalidInputError):
            SegmentedExample(id="x", query=(3,), segments=((5,),), answer=(7,), positives=(1,))


class TestNeedle:
    def test_vocab_ranges_are_disjoint(self):
        vocab = NeedleVocab(64)
        assert set(vocab.keys).isdisjoint(vocab.values)
        assert set(vocab.values).isdisjoint(vocab.fillers)
        assert max(vocab.fillers) == 63

    def test_deterministic(self):
        assert make_needle(9, 8, 8, vocab_size=64) == make_needle(9, 8, 8, vocab_size=64)
        assert make_needle(9, 8, 8, vocab_size=64) != make_needle(10, 8, 8, vocab_size=64)

    def test_single_fact(self):
        example = make_needle(9, 8, 8, vocab_size=64)
        key = example.query[1]
        assert example.query[0] == QUERY_ID
        (holder,) = example.positives
        segment = example.segments[holder]
        offset = segment.index(key)
        assert segment[offset + 1] == example.answer[0]
        assert all(key not in s for i, s in enumerate(example.segments) if i != holder)

    def test_distractors_live_elsewhere(self):
        example = make_needle(4, 8, 8, n_facts=4, vocab_size=64)
        vocab = NeedleVocab(64)
        holders = {i for i, s in enumerate(example.segments) if any(t in vocab.keys for t in s)}
        assert len(holders) == 4
        assert set(example.positives) < holders

    def test_chain_positives(self):
        example = make_needle(4, 8, 8, n_facts=3, vocab_size=64)
        assert len(example.positives) == 2
        bridge_holder = next(
            i for i in example.positives if example.query[1] in example.segments[i]
        )
        answer_holder = next(i for i in example.positives if i != bridge_holder)
        assert example.answer[0] in example.segments[answer_holder]

    def test_answer_only_positives(self):
        required = make_needle(4, 8, 8, n_facts=3, vocab_size=64)
        answer = make_needle(4, 8, 8, n_facts=3, vocab_size=64, positives="answer")
        assert len(answer.positives) == 1
        assert set(answer.positives) < set(required.positives)
        assert answer.answer[0] in answer.segments[answer.positives[0]]

    def test_too_many_facts(self):
        with pytest.raises(InvalidInputError):
            make_needle(1, 4, 8, n_facts=5, vocab_size=64)


class TestSummary:
    def test_markers_in_order(self):
        example = make_summary(3, 8, 8, n_facts=3, vocab_size=64)
        assert not example.has_positives
        assert example.query == (QUERY_ID,)
        found = [tok for s in example.segments for tok in s if tok in NeedleVocab(64).values]
        assert tuple(found) == example.answer

    def test_dataset_mix(self):
        examples = make_dataset(5, 40, 4, 8, vocab_size=64, summary_fraction=0.5)
        kinds = {e.id.split("-")[0] for e in examples}
        assert kinds == {"needle", "summary"}

    def test_dataset_seeds_differ(self):
        a = make_dataset(1, 5, 4, 8, vocab_size=64)
        b = make_dataset(2, 5, 4, 8, vocab_size=64)
        assert {e.id for e in a}.isdisjoint(e.id for e in b)


class TestPositionsToSegments:
    @pytest.mark.parametrize(
        "spans, expected",
        [
            ([(0, 0)], (0,)),
            ([(49, 50)], (0, 1)),
            ([(120, 130)], (2,)),
            ([(10, 20), (140, 160)], (0, 2, 3)),
        ],
    )
    def test_spans(self, spans, expected):
        assert positions_to_segments(spans, 50) == expected

    def test_out_of_document(self):
        with pytest.raises(InvalidInputError):
            positions_to_segments([(90, 100)], 50, doc_len=100)

    def test_no_spans_warns(self, caplog):
        with caplog.at_level(logging.WARNING, logger="skimread"):
            assert positions_to_segments([], 50) == ()
        assert "no positive segments" in caplog.text


class TestScoring:
    def test_normalize(self):
        assert normalize_answer("The  Cat, sat!") == "cat sat"

    def test_exact_match(self):
        assert em_f1("Paris", "paris.") == (1, 1.0)

    def test_partial_overlap(self):
        em, f1 = em_f1("new york city", "new york")
        assert em == 0
        assert f1 == pytest.approx(0.8)
        assert em_f1("new york", "new york city") == (em, f1)

    def test_fractional_f1(self):
        _, f1 = em_f1([5, 6], [5, 7, 8, 9])
        assert f1 == pytest.approx(1 / 3, abs=1e-4)
        _, f1 = em_f1("x y z", "y z w")
        assert f1 == pytest.approx(0.6667, abs=1e-4)

    def test_token_ids_ignore_eos(self):
        assert em_f1([9, EOS_ID], [9]) == (1, 1.0)

    def test_empty_prediction(self):
        assert em_f1("", "x") == (0, 0.0)

    def test_empty_reference(self):
        with pytest.raises(InvalidInputError):
            em_f1("x", "")


class TestJsonl:
    def test_round_trip(self, tmp_path):
        examples = make_dataset(3, 3, 4, 8, vocab_size=64)
        path = tmp_path / "data.jsonl"
        write_examples(path, examples)
        assert read_examples(path) == examples

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"id": "a", "query": [3]}\n')
        with pytest.raises(DataError, match="bad.jsonl:1"):
            read_examples(path)

    def test_not_json(self):
        with pytest.raises(DataError):
            loads_example("not json")

    def test_not_an_object(self):
        with pytest.raises(DataError):
            loads_example("[1, 2]")

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("\n")
        with pytest.raises(DataError, match="no examples"):
            read_examples(path)
