# SPDX-FileCopyrightText: 2015 Eric Larson, 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0
from __future__ import annotations

import csv
import json
import logging
import os
import statistics
import sys
import typing as t
from argparse import ArgumentParser, Namespace
from dataclasses import replace

from skimread.checkpoint import CheckpointFile
from skimread.compressor import plan_report
from skimread.config import MODES, DataConfig, RunConfig, load_config
from skimread.cost_model import BENCH_COLUMNS, FLOPS_HEADER, CostDims, bench, flops_report
from skimread.data import (
    Tokenizer,
    loads_example,
    make_dataset,
    read_examples,
    write_examples,
)
from skimread.errors import ConfigError, DataError, InvalidInputError, NumericalError
from skimread.evaluation import METRIC_COLUMNS, evaluate
from skimread.model import init_model
from skimread.training import Mode, Trainer, build_memory

if t.TYPE_CHECKING:
    from skimread.data import SegmentedExample
    from skimread.model import RamModel

logger = logging.getLogger("skimread")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def setup_logging(verbose: bool = False) -> None:
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    if any(type(h) is logging.StreamHandler for h in logger.handlers):
        return
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.addHandler(handler)


def write_csv(
    path: str,
    config: RunConfig,
    columns: t.Sequence[str],
    rows: t.Iterable[t.Sequence[t.Any] | t.Mapping[str, t.Any]],
    note: str = "",
) -> None:
    with open(path, "w", newline="", encoding="utf8") as fh:
        header = " ".join(f"{k}={v}" for k, v in config.header().items())
        fh.write(f"# {header}\n")
        if note:
            fh.write(f"# {note}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            if isinstance(row, t.Mapping):
                row = [row[c] for c in columns]
            writer.writerow(row)
    logger.info("Wrote %s", path)


def _out(config: RunConfig, name: str) -> str:
    os.makedirs(config.out_dir, exist_ok=True)
    return os.path.join(config.out_dir, name)


def load_examples(config: RunConfig, split: str) -> list[SegmentedExample]:
    data = config.data
    path = data.train_path if split == "train" else data.eval_path
    if path:
        if not os.path.isfile(path):
            raise ConfigError(f"dataset not found: {path}")
        return read_examples(path)
    size = data.train_size if split == "train" else data.eval_size
    seed = config.seed if split == "train" else config.seed + 1
    return make_dataset(
        seed,
        size,
        data.n_segments,
        data.segment_len,
        data.n_facts,
        config.model.vocab_size,
        data.positives,
        data.summary_fraction,
    )


def _checkpoint_path(args: Namespace, config: RunConfig) -> str:
    return args.checkpoint or os.path.join(config.out_dir, "model.ckpt")


def _load_model(args: Namespace, config: RunConfig) -> RamModel:
    return CheckpointFile(_checkpoint_path(args, config)).load_model()


def train_model(
    config: RunConfig, examples: t.Sequence[SegmentedExample], log_path: str | None = None
) -> tuple[RamModel, str]:
    model = init_model(config.model, seed=config.seed)
    logger.info("Training %d parameters on %d examples", model.n_parameters(), len(examples))
    trainer = Trainer(model, config.train, log_path=log_path, header=config.header())
    result = trainer.fit(examples)
    return model, result.order_digest


def _no_paths(config: RunConfig) -> DataConfig:
    return replace(config.data, train_path="", eval_path="")


def cmd_gen(args: Namespace, config: RunConfig) -> int:
    for split in ("train", "eval"):
        path = _out(config, f"{split}.jsonl")
        write_examples(path, load_examples(replace(config, data=_no_paths(config)), split))
        logger.info("Wrote %s", path)
    return EXIT_OK


def cmd_train(args: Namespace, config: RunConfig) -> int:
    examples = load_examples(config, "train")
    model, order_digest = train_model(config, examples, _out(config, "train_log.csv"))
    path = _checkpoint_path(args, config)
    digest = CheckpointFile(path).write(model, meta=config.header())
    logger.info("Checkpoint %s digest %s (data order %s)", path, digest, order_digest)
    print(digest)
    return EXIT_OK


def cmd_eval(args: Namespace, config: RunConfig) -> int:
    model = _load_model(args, config)
    examples = load_examples(config, "eval")
    rows = []
    for rate in config.eval.rates:
        result = evaluate(
            model,
            examples,
            rate,
            mode=config.train.mode,
            tau=config.train.tau,
            max_answer_len=config.eval.max_answer_len,
            workers=config.eval.workers,
            rate_pool=config.train.rate_pool,
        )
        rows.append(result.row())
    write_csv(_out(config, "metrics.csv"), config, METRIC_COLUMNS, rows)
    return EXIT_OK


ABLATION_COLUMNS = (
    "mode",
    "rate",
    "em",
    "f1",
    "recall",
    "achieved_ratio",
    "mean_L_c",
    "data_order_digest",
)


def cmd_ablate(args: Namespace, config: RunConfig) -> int:
    train_set = load_examples(config, "train")
    eval_set = load_examples(config, "eval")
    rate = config.eval.ablation_rate
    rows = []
    for mode in MODES:
        run = replace(config, train=replace(config.train, mode=mode))
        logger.info("Ablation: training mode %s", mode)
        model, order_digest = train_model(run, train_set)
        result = evaluate(
            model,
            eval_set,
            rate,
            mode=mode,
            tau=run.train.tau,
            max_answer_len=run.eval.max_answer_len,
            workers=run.eval.workers,
        )
        cells = dict(zip(METRIC_COLUMNS, result.row()))
        rows.append(
            (
                mode,
                cells["rate"],
                cells["em"],
                cells["f1"],
                cells["recall"],
                cells["achieved_ratio"],
                cells["mean_L_c"],
                order_digest,
            )
        )
    write_csv(_out(config, "ablation.csv"), config, ABLATION_COLUMNS, rows)
    return EXIT_OK


def _read_input(path: str) -> SegmentedExample:
    if not os.path.isfile(path):
        raise DataError(f"input not found: {path}")
    with open(path, encoding="utf8") as fh:
        text = fh.read().strip()
    if not text:
        raise DataError(f"{path}: empty input")
    # a JSONL file contributes its first example
    first = text if text.startswith("{") and "\n{" not in text else text.splitlines()[0]
    return loads_example(first)


def cmd_compress(args: Namespace, config: RunConfig) -> int:
    if not args.input:
        raise ConfigError("compress needs --input")
    example = _read_input(args.input)
    model = _load_model(args, config)
    rate = config.eval.rates[0]
    comp = build_memory(example, model, rate, config.train.mode, config.train.tau)
    report = plan_report(example, comp.plan, comp.memory, Tokenizer(model.config.vocab_size))
    report["header"] = config.header()
    path = _out(config, "plan.json")
    with open(path, "w", encoding="utf8") as fh:
        json.dump(report, fh, indent=2, allow_nan=False)
        fh.write("\n")
    logger.info("Wrote %s", path)
    return EXIT_OK


def cmd_bench(args: Namespace, config: RunConfig) -> int:
    if args.checkpoint:
        model = _load_model(args, config)
    else:
        logger.info("No checkpoint given; benchmarking random weights")
        model = init_model(config.model, seed=config.seed)
    examples = make_dataset(
        config.seed + 2,
        config.bench.n_examples,
        config.bench.n_segments,
        config.data.segment_len,
        vocab_size=config.model.vocab_size,
    )
    rows = bench(
        model,
        examples,
        config.bench.rates,
        repetitions=config.bench.repetitions,
        warmup=config.bench.warmup,
        answer_len=config.bench.answer_len,
    )
    write_csv(_out(config, "bench.csv"), config, BENCH_COLUMNS, [r.row() for r in rows])
    return EXIT_OK


def cmd_flops(args: Namespace, config: RunConfig) -> int:
    dims = CostDims(
        L_org=config.data.n_segments * config.data.segment_len,
        L_seg=config.data.segment_len,
        L_q=2,  # <q> key
        L_a=config.eval.max_answer_len,
        d=config.model.d_model,
        n_layers=config.model.n_layers,
        n_heads=config.model.n_heads,
        V=config.model.vocab_size,
        d_ff=config.model.d_ff,
    )
    rows = [flops_report(dims, rate).row() for rate in config.eval.rates]
    columns = tuple(rows[0]) if rows else ()
    write_csv(_out(config, "flops.csv"), config, columns, rows, note=FLOPS_HEADER)
    return EXIT_OK


SWEEP_COLUMNS = ("segment_len", "n_segments", "rate", "em", "f1", "recall", "mean_L_c")


def cmd_sweep(args: Namespace, config: RunConfig) -> int:
    context_len = config.data.n_segments * config.data.segment_len
    rate = config.sweep.rate
    rows = []
    ems = []
    for segment_len in config.sweep.segment_lens:
        if context_len % segment_len:
            raise ConfigError(
                f"sweep.segment_lens entry {segment_len} does not divide context length "
                f"{context_len}"
            )
        data = replace(
            _no_paths(config), segment_len=segment_len, n_segments=context_len // segment_len
        )
        model_config = replace(
            config.model, max_segment_len=max(config.model.max_segment_len, segment_len)
        )
        run = replace(config, data=data, model=model_config)
        logger.info("Sweep: training with segments of %d tokens", segment_len)
        model, _ = train_model(run, load_examples(run, "train"))
        result = evaluate(
            model,
            load_examples(run, "eval"),
            rate,
            tau=run.train.tau,
            max_answer_len=run.eval.max_answer_len,
            workers=run.eval.workers,
        )
        ems.append(result.em)
        rows.append(
            (
                segment_len,
                data.n_segments,
                f"{rate:g}",
                f"{result.em:.6f}",
                f"{result.f1:.6f}",
                "" if result.recall is None else f"{result.recall:.6f}",
                f"{result.mean_L_c:.4f}",
            )
        )
    spread = statistics.pstdev(ems) if ems else 0.0
    mean = statistics.fmean(ems) if ems else 0.0
    rows.append(("mean", "", f"{rate:g}", f"{mean:.6f}", f"std={spread:.6f}", "", ""))
    write_csv(_out(config, "sweep.csv"), config, SWEEP_COLUMNS, rows)
    return EXIT_OK


COMMANDS: dict[str, t.Callable[[Namespace, RunConfig], int]] = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "compress": cmd_compress,
    "bench": cmd_bench,
    "flops": cmd_flops,
    "sweep": cmd_sweep,
}


def get_args(argv: t.Sequence[str] | None = None) -> Namespace:
    parser = ArgumentParser(prog="skimread", description="Query-aware context compression")
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one configuration key; may be repeated",
    )
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--rates", help="comma separated compression rates")
    parser.add_argument("--mode", choices=[m.value for m in Mode], help="ablation mode")
    parser.add_argument("--workers", type=int, help="evaluation worker threads")
    parser.add_argument("--checkpoint", help="checkpoint file (default: <out>/model.ckpt)")
    parser.add_argument("--input", help="example to compress (JSON or JSONL)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser.parse_args(argv)


def _overrides(args: Namespace) -> list[str]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.rates:
        key = "bench.rates" if args.subcommand == "bench" else "eval.rates"
        overrides.append(f"{key}={args.rates}")
    if args.mode:
        overrides.append(f"train.mode={args.mode}")
    if args.workers is not None:
        overrides.append(f"eval.workers={args.workers}")
    return overrides


def main(argv: t.Sequence[str] | None = None) -> int:
    args = get_args(argv)
    setup_logging(args.verbose)
    try:
        config = load_config(
            args.config,
            _overrides(args),
            subcommand=args.subcommand,
            out_dir=args.out,
        )
        return COMMANDS[args.subcommand](args, config)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, InvalidInputError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
