# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

"""SkimRead import interface.

Query-aware compression of long contexts: close reading for the relevant
segments, skimming for the rest.
"""
import logging

from skimread.compressor import CompressionPlan, HybridMemory, plan_compression
from skimread.config import RunConfig, load_config
from skimread.data import SegmentedExample, make_needle
from skimread.errors import ConfigError, DataError, InvalidInputError, NumericalError, RamError
from skimread.model import RamModel, init_model
from skimread.training import Mode, Trainer, build_memory

__version__ = "23.3"

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = (
    "CompressionPlan",
    "ConfigError",
    "DataError",
    "HybridMemory",
    "InvalidInputError",
    "Mode",
    "NumericalError",
    "RamError",
    "RamModel",
    "RunConfig",
    "SegmentedExample",
    "Trainer",
    "build_memory",
    "init_model",
    "load_config",
    "make_needle",
    "plan_compression",
)
