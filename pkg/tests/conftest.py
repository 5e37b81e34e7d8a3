# SPDX-FileCopyrightText: 2015 Eric Larson, 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

import logging

import numpy as np
import pytest

from skimread.data import make_needle
from skimread.model import init_model

from .utils import TINY


@pytest.fixture()
def tiny_config():
    return TINY


@pytest.fixture()
def tiny_model():
    return init_model(TINY, seed=0)


@pytest.fixture()
def needle():
    """Four segments of eight tokens with one planted fact."""
    return make_needle(seed=3, n_segments=4, segment_len=8, vocab_size=TINY.vocab_size)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def quiet_package_logger():
    logger = logging.getLogger("skimread")
    handlers = list(logger.handlers)
    level = logger.level
    yield
    logger.setLevel(level)
    for handler in logger.handlers[:]:
        if handler not in handlers:
            logger.removeHandler(handler)
