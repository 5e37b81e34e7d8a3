"""
Brute-force oracles shared by the tests.
"""
import math

import numpy as np

from skimread.config import ModelConfig
from skimread.encoder import HiddenStates
from skimread.numerics import Tensor

TINY = ModelConfig(
    vocab_size=64,
    d_model=16,
    n_layers=2,
    n_heads=2,
    d_ff=32,
    max_segment_len=16,
    max_context=160,
)


def softmax_oracle(values, tau=1.0):
    exps = [math.exp(v / tau) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def nll_oracle(logits, targets):
    """Mean negative log-likelihood by direct log-sum-exp."""
    total = 0.0
    for row, target in zip(logits, targets):
        lse = math.log(sum(math.exp(x) for x in row))
        total += lse - row[target]
    return total / len(targets)


def states(rows):
    return HiddenStates(Tensor(np.asarray(rows, dtype=float)))


def rank_correlation(a, b):
    """Spearman correlation (no tie correction)."""
    ra = np.argsort(np.argsort(a)).astype(float)
    rb = np.argsort(np.argsort(b)).astype(float)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / math.sqrt((ra * ra).sum() * (rb * rb).sum()))
