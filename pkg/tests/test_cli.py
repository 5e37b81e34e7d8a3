# SPDX-FileCopyrightText: 2015 Eric Larson, 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

import csv
import json
import logging

import pytest

from skimread._cmd import get_args, main, setup_logging

TINY_RUN = [
    "model.vocab_size=64",
    "model.d_model=16",
    "model.n_heads=2",
    "model.d_ff=32",
    "model.max_segment_len=16",
    "model.max_context=160",
    "data.n_segments=4",
    "data.segment_len=8",
    "data.train_size=8",
    "data.eval_size=4",
    "train.steps=3",
    "train.batch_size=2",
    "train.log_every=1",
    "eval.max_answer_len=2",
]


def run(out, subcommand, *extra):
    argv = [subcommand, "--out", str(out), "--seed", "7"]
    for override in TINY_RUN:
        argv += ["--set", override]
    return main([*argv, *extra])


def read_table(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# config_digest=")
    assert lines[0].endswith(" seed=7")
    return list(csv.DictReader(line for line in lines[1:] if not line.startswith("#")))


def test_get_args():
    args = get_args(["eval", "--rates", "2,4", "--set", "seed=3", "--workers", "2"])
    assert args.subcommand == "eval"
    assert args.rates == "2,4"
    assert args.overrides == ["seed=3"]
    assert args.workers == 2


def test_setup_logging_is_idempotent():
    setup_logging()
    setup_logging(verbose=True)
    logger = logging.getLogger("skimread")
    assert sum(type(h) is logging.StreamHandler for h in logger.handlers) == 1
    assert logger.level == logging.DEBUG


class TestExitCodes:
    def test_unknown_key(self, tmp_path):
        assert run(tmp_path, "flops", "--set", "model.width=3") == 2

    def test_missing_dataset(self, tmp_path):
        assert run(tmp_path, "train", "--set", f"data.train_path={tmp_path / 'nope.jsonl'}") == 2

    def test_missing_checkpoint(self, tmp_path):
        assert run(tmp_path, "eval") == 3

    def test_compress_needs_input(self, tmp_path):
        assert run(tmp_path, "compress") == 2

    def test_compress_bad_input(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("not json")
        assert run(tmp_path, "compress", "--input", str(bad)) == 3

    def test_malformed_dataset(self, tmp_path):
        data = tmp_path / "train.jsonl"
        data.write_text('{"id": "x"}\n')
        assert run(tmp_path, "train", "--set", f"data.train_path={data}") == 3


class TestPipeline:
    def test_gen(self, tmp_path):
        assert run(tmp_path, "gen") == 0
        train = (tmp_path / "train.jsonl").read_text().splitlines()
        evals = (tmp_path / "eval.jsonl").read_text().splitlines()
        assert len(train) == 8
        assert len(evals) == 4
        assert not set(train) & set(evals)

    def test_train_eval_compress(self, tmp_path, capsys):
        assert run(tmp_path, "train") == 0
        digest = capsys.readouterr().out.strip()
        assert len(digest) == 56
        assert (tmp_path / "model.ckpt").exists()
        log = read_table(tmp_path / "train_log.csv")
        assert [row["step"] for row in log] == ["1", "2", "3"]

        assert run(tmp_path, "eval", "--rates", "2,4") == 0
        metrics = read_table(tmp_path / "metrics.csv")
        assert [row["rate"] for row in metrics] == ["2", "4"]
        assert [row["mean_L_c"] for row in metrics] == ["18.0000", "11.0000"]

        assert run(tmp_path, "gen") == 0
        example = (tmp_path / "eval.jsonl").read_text().splitlines()[0]
        one = tmp_path / "one.json"
        one.write_text(example)
        assert run(tmp_path, "compress", "--input", str(one), "--rates", "2") == 0
        plan = json.loads((tmp_path / "plan.json").read_text())
        assert plan["k"] == 2
        assert plan["L_c"] == 18
        assert [s["action"] for s in plan["segments"]].count("close_read") == 2
        assert len(plan["retained_text"]) == 2

        extra = ["--input", str(one), "--rates", "32", "--mode", "no_skimming"]
        assert run(tmp_path, "compress", *extra) == 0
        plan = json.loads((tmp_path / "plan.json").read_text(), parse_constant=pytest.fail)
        assert plan["L_c"] == 0
        assert plan["achieved_ratio"] is None

    def test_reruns_are_byte_identical(self, tmp_path, capsys):
        first, second = tmp_path / "a", tmp_path / "b"
        for out in (first, second):
            assert run(out, "train") == 0
            assert run(out, "eval", "--rates", "2") == 0
        digests = capsys.readouterr().out.split()
        assert digests[0] == digests[1]
        assert (first / "model.ckpt").read_bytes() == (second / "model.ckpt").read_bytes()
        assert (first / "metrics.csv").read_text() == (second / "metrics.csv").read_text()

    def test_flops(self, tmp_path):
        assert run(tmp_path, "flops", "--rates", "1,2,4") == 0
        lines = (tmp_path / "flops.csv").read_text().splitlines()
        assert lines[1].startswith("# FLOPs from matrix products only")
        rows = read_table(tmp_path / "flops.csv")
        assert [row["L_c"] for row in rows] == ["32", "18", "11"]
        assert float(rows[0]["ratio"]) > float(rows[2]["ratio"])

    def test_bench_random_weights(self, tmp_path):
        extra = ["--set", "bench.repetitions=1", "--set", "bench.warmup=0"]
        extra += ["--set", "bench.n_segments=4", "--set", "bench.n_examples=1"]
        assert run(tmp_path, "bench", "--rates", "2", *extra) == 0
        rows = read_table(tmp_path / "bench.csv")
        assert [row["method"] for row in rows] == ["Original Prompt", "RAM"]


@pytest.mark.slow
def test_ablate_and_sweep(tmp_path):
    assert run(tmp_path, "ablate", "--set", "eval.ablation_rate=2") == 0
    rows = read_table(tmp_path / "ablation.csv")
    assert [row["mode"] for row in rows] == [
        "default",
        "no_skimming",
        "no_close_reading",
        "ap_skimming",
        "no_contrastive",
    ]
    assert len({row["data_order_digest"] for row in rows}) == 1

    assert run(tmp_path, "sweep", "--set", "sweep.segment_lens=4,8,16") == 0
    rows = read_table(tmp_path / "sweep.csv")
    assert [row["segment_len"] for row in rows] == ["4", "8", "16", "mean"]
