# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

import pytest

from skimread.model import init_model
from skimread.numerics import grad_check
from skimread.training import Mode, example_loss

from .utils import TINY

TOLERANCE = 1e-4


def _dense(params, prefix):
    # embedding tables are checked separately on the rows the example touches
    return [p for name, p in params.items() if name.startswith(prefix) and "embed" not in name]


class TestEndToEndGradients:
    @pytest.fixture(autouse=True)
    def setup(self, needle):
        self.example = needle
        self.model = init_model(TINY, seed=0)
        self.plan = example_loss(needle, self.model, 2).plan
        self.params = self.model.parameters()

    def loss(self, mode=Mode.DEFAULT):
        return lambda: example_loss(self.example, self.model, 2, mode, plan=self.plan).total

    def test_plan_has_both_actions(self):
        assert self.plan.retained
        assert self.plan.skimmed

    def test_encoder(self):
        params = _dense(self.params, "encoder.")
        assert grad_check(self.loss(), params, eps=1e-5, max_coords=12) < TOLERANCE

    def test_decoder(self):
        params = _dense(self.params, "decoder.")
        assert grad_check(self.loss(), params, eps=1e-5, max_coords=12) < TOLERANCE

    def test_decoder_embedding_of_retained_tokens(self):
        retained = sorted({tok for i in self.plan.retained for tok in self.example.segments[i]})
        table = self.params["decoder.word_embed"]
        error = grad_check(self.loss(), [table], eps=1e-5, max_coords=32, rows=[retained[:4]])
        assert error < TOLERANCE

    def test_encoder_embedding_of_query_tokens(self):
        table = self.params["encoder.token_embed"]
        rows = [sorted(set(self.example.query))]
        assert grad_check(self.loss(), [table], eps=1e-5, max_coords=32, rows=rows) < TOLERANCE

    def test_alignment_matrix_in_full(self):
        align = self.params["align.weight"]
        assert grad_check(self.loss(), [align], eps=1e-5, max_coords=align.size) < TOLERANCE

    def test_average_pool_skimming(self):
        params = [self.params["align.weight"], self.params["encoder.final_gain"]]
        loss = self.loss(Mode.AP_SKIMMING)
        assert grad_check(loss, params, eps=1e-5, max_coords=24) < TOLERANCE
