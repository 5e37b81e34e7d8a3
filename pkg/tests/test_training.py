# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from skimread.compressor import AlignmentMatrix, CompressionPlan, SkimEntry, assemble
from skimread.config import TrainConfig
from skimread.data import SegmentedExample, make_dataset, make_needle, make_summary
from skimread.errors import ConfigError, InvalidInputError, NumericalError
from skimread.model import init_model
from skimread.numerics import GradTape, Tensor, parameter
from skimread.training import (
    Adam,
    Mode,
    Trainer,
    alpha_histogram,
    apply_mode,
    build_memory,
    contrastive_loss,
    example_loss,
    total_loss,
    train_step,
)

from .utils import TINY, states


def _basis(d):
    return [Tensor(row) for row in np.eye(d)]


class TestContrastiveLoss:
    def test_symmetric_single_positive(self):
        reps = [Tensor([1.0, 1.0])] * 4
        loss = contrastive_loss(Tensor([1.0, 0.0]), reps, [2])
        assert float(loss.data) == pytest.approx(math.log(4), abs=1e-12)

    def test_all_positive_symmetric(self):
        reps = [Tensor([0.5, -1.0])] * 6
        loss = contrastive_loss(Tensor([1.0, 2.0]), reps, range(6), tau=0.3)
        assert float(loss.data) == pytest.approx(math.log(6), abs=1e-12)

    def test_sharp_positive(self):
        loss = contrastive_loss(Tensor([1.0, 0.0, 0.0, 0.0]), _basis(4), [0], tau=0.1)
        expected = math.log(1 + 3 * math.exp(-10))
        assert float(loss.data) == pytest.approx(expected, rel=1e-9)
        assert float(loss.data) == pytest.approx(1.362e-4, abs=1e-7)

    def test_empty_positives_contribute_nothing(self):
        assert float(contrastive_loss(Tensor([1.0, 0.0]), _basis(2), []).data) == 0.0

    def test_invalid_index(self):
        with pytest.raises(InvalidInputError):
            contrastive_loss(Tensor([1.0, 0.0]), _basis(2), [2])

    def test_scale_invariance(self, rng):
        r_q = Tensor(rng.normal(size=5))
        reps = [Tensor(rng.normal(size=5)) for _ in range(4)]
        base = float(contrastive_loss(r_q, reps, [1, 3]).data)
        scaled = float(contrastive_loss(r_q * 4.0, [r * 0.1 for r in reps], [1, 3]).data)
        assert scaled == pytest.approx(base, abs=1e-12)

    def test_decreases_as_positive_aligns(self):
        r_q = Tensor([1.0, 0.0])
        negatives = [Tensor([0.0, 1.0]), Tensor([-1.0, 0.2])]
        losses = []
        for angle in (1.2, 0.8, 0.4, 0.0):
            positive = Tensor([math.cos(angle), math.sin(angle)])
            losses.append(float(contrastive_loss(r_q, [positive, *negatives], [0]).data))
        assert all(a > b for a, b in zip(losses, losses[1:]))


class TestTotalLoss:
    def test_sum(self):
        assert float(total_loss(Tensor(2.0), Tensor(0.5)).data) == 2.5

    def test_zero_contrastive(self):
        assert float(total_loss(Tensor(1.25), Tensor(0.0)).data) == 1.25

    def test_no_contrastive_mode(self):
        assert float(total_loss(Tensor(2.0), Tensor(0.5), Mode.NO_CONTRASTIVE).data) == 2.0

    def test_gradient_is_sum_of_terms(self):
        x = parameter([1.0, 2.0])
        with GradTape() as tape:
            a = (x * x).sum()
            b = (x * 3.0).sum()
            total = total_loss(a, b)
        (grad,) = tape.gradient(total, [x])
        assert grad.tolist() == [5.0, 7.0]


class TestApplyMode:
    def setup_method(self):
        self.plan = CompressionPlan((0.1, 0.6, 0.3), (0.0, 0.9, 0.4), 3.0, 1, (1,), (0, 2))
        self.states = [states([[1.0, 2.0], [1.0, 2.0]]) for _ in range(3)]
        self.r_q = Tensor([0.3, -0.7])

    def test_default(self):
        inputs = apply_mode(self.plan, self.states, self.r_q)
        assert sorted(inputs.skim_vectors) == [0, 2]
        assert not inputs.drop_skimmed

    def test_no_skimming(self):
        inputs = apply_mode(self.plan, self.states, self.r_q, Mode.NO_SKIMMING)
        assert inputs.drop_skimmed
        assert inputs.skim_vectors == {}

    def test_no_close_reading(self):
        inputs = apply_mode(self.plan, self.states, self.r_q, "no_close_reading")
        assert inputs.plan.retained == ()
        assert sorted(inputs.skim_vectors) == [0, 1, 2]

    def test_average_pool_equals_default_on_constant_states(self):
        default = apply_mode(self.plan, self.states, self.r_q)
        pooled = apply_mode(self.plan, self.states, self.r_q, Mode.AP_SKIMMING)
        for i in (0, 2):
            assert pooled.skim_vectors[i].data == pytest.approx(
                default.skim_vectors[i].data, abs=1e-12
            )

    def test_no_skimming_memory_length(self):
        n, l_seg, k = 20, 50, 5
        example = SegmentedExample(
            id="long",
            query=(3, 5),
            segments=tuple(tuple([10] * l_seg) for _ in range(n)),
            answer=(7,),
        )
        retained, skimmed = tuple(range(k)), tuple(range(k, n))
        plan = CompressionPlan((1 / n,) * n, (0.0,) * n, 4.0, k, retained, skimmed)
        inputs = apply_mode(plan, [], self.r_q, Mode.NO_SKIMMING)
        embed = Tensor(np.zeros((16, 2)))
        memory = assemble(
            example,
            inputs.plan,
            inputs.skim_vectors,
            AlignmentMatrix.identity(2),
            embed,
            drop_skimmed=inputs.drop_skimmed,
        )
        assert memory.total_length == 250

    def test_no_close_reading_memory_of_eight_vectors(self, tiny_model):
        example = make_needle(5, n_segments=8, segment_len=4, vocab_size=64)
        comp = build_memory(example, tiny_model, 2, Mode.NO_CLOSE_READING)
        assert comp.memory.total_length == 8
        assert all(isinstance(e, SkimEntry) for e in comp.memory.entries)


class TestAdam:
    def test_first_step_moves_by_learning_rate(self):
        w = parameter([1.0, -3.0])
        opt = Adam({"w": w}, lr=0.1)
        opt.step({"w": np.array([2.0, -0.5])})
        assert w.data == pytest.approx([0.9, -2.9], abs=1e-6)

    def test_linear_decay(self):
        opt = Adam({"w": parameter([0.0])}, lr=1e-3, total_steps=100)
        assert opt.lr_at(0) == 1e-3
        assert opt.lr_at(50) == pytest.approx(5e-4)
        assert opt.lr_at(100) == 0.0

    def test_minimises_quadratic(self):
        w = parameter([4.0, -2.0])
        opt = Adam({"w": w}, lr=0.05)
        for _ in range(400):
            opt.step({"w": 2 * w.data})
        assert np.abs(w.data).max() < 0.1


class TestTrainStep:
    def setup_method(self):
        self.config = TrainConfig(batch_size=2, steps=10, learning_rate=1e-2)
        self.batch = make_dataset(11, 2, n_segments=4, segment_len=8, vocab_size=64)

    def test_updates_every_parameter_group(self):
        model = init_model(TINY, seed=0)
        before = model.state_dict()
        opt = Adam(model.parameters(), lr=1e-2)
        result = train_step(self.batch, model, opt, self.config, np.random.default_rng(0))
        after = model.state_dict()
        assert math.isfinite(result.loss)
        assert result.loss == pytest.approx(result.loss_nll + result.loss_con)
        assert len(result.alphas) == 2
        assert set(result.alphas) <= set(self.config.rate_pool)
        for name in ("encoder.token_embed", "decoder.out_proj", "align.weight"):
            assert not np.array_equal(before[name], after[name])

    def test_non_finite_loss(self):
        model = init_model(TINY, seed=0)
        model.decoder.out_proj.data[...] = np.nan
        opt = Adam(model.parameters())
        with pytest.raises(NumericalError, match="step 7") as exc_info:
            train_step(self.batch, model, opt, self.config, np.random.default_rng(0), step=7)
        assert self.batch[0].id in str(exc_info.value)

    def test_summary_examples_are_flagged(self):
        model = init_model(TINY, seed=0)
        batch = [make_summary(2, 4, 8, vocab_size=64), self.batch[0]]
        opt = Adam(model.parameters())
        result = train_step(batch, model, opt, self.config, np.random.default_rng(0))
        assert result.flagged == [batch[0].id]

    def test_no_contrastive_gradients_are_nll_only(self, needle):
        model = init_model(TINY, seed=0)
        params = list(model.parameters().values())
        with GradTape() as tape:
            default = example_loss(needle, model, 2)
        nll_grads = tape.gradient(default.nll, params)
        with GradTape() as tape:
            ablated = example_loss(needle, model, 2, Mode.NO_CONTRASTIVE)
        assert float(ablated.con.data) == 0.0
        for a, b in zip(tape.gradient(ablated.total, params), nll_grads):
            assert np.array_equal(a, b)


class TestTrainer:
    def setup_method(self):
        self.examples = make_dataset(21, 6, n_segments=4, segment_len=8, vocab_size=64)
        self.config = TrainConfig(batch_size=2, steps=6, learning_rate=1e-2, seed=5, log_every=2)

    def test_same_seed_same_trajectory(self):
        first, second = init_model(TINY, seed=0), init_model(TINY, seed=0)
        a = Trainer(first, self.config).fit(self.examples)
        b = Trainer(second, self.config).fit(self.examples)
        assert a.order_digest == b.order_digest
        assert a.losses == b.losses
        for name, value in first.state_dict().items():
            assert np.array_equal(value, second.state_dict()[name])

    def test_order_digest_is_shared_across_modes(self):
        a = Trainer(init_model(TINY), self.config).fit(self.examples, steps=2)
        config = replace(self.config, mode="no_contrastive")
        b = Trainer(init_model(TINY), config).fit(self.examples, steps=2)
        assert a.order_digest == b.order_digest

    def test_log_file(self, tmp_path):
        path = tmp_path / "train_log.csv"
        header = {"config_digest": "abc", "seed": 5}
        Trainer(init_model(TINY), self.config, log_path=path, header=header).fit(self.examples)
        lines = path.read_text().splitlines()
        assert lines[0] == "# config_digest=abc seed=5"
        rows = list(csv.DictReader(lines[1:]))
        assert list(rows[0]) == ["step", "loss_nll", "loss_con", "alpha_histogram", "wall_time"]
        assert [r["step"] for r in rows] == ["2", "4", "6"]

    def test_empty_dataset(self):
        with pytest.raises(InvalidInputError):
            Trainer(init_model(TINY), self.config).fit([])

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            Trainer(init_model(TINY), TrainConfig(rate_pool=(0.5,)))

    def test_loss_decreases_on_fixed_batch(self):
        examples = make_dataset(31, 4, n_segments=4, segment_len=8, vocab_size=64)
        config = TrainConfig(batch_size=4, steps=80, learning_rate=3e-3, seed=1)
        result = Trainer(init_model(TINY, seed=1), config).fit(examples)
        assert np.mean(result.losses[-10:]) < np.mean(result.losses[:10])


def test_alpha_histogram():
    assert alpha_histogram([2.0, 4.0, 2.0, 32.0]) == "2:2|4:1|32:1"


def test_parameter_count():
    # encoder 5760, decoder 9088, alignment 16 x 16
    assert init_model(TINY).n_parameters() == 5760 + 9088 + 256
