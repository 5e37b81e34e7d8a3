# SPDX-FileCopyrightText: 2023 Frost Ming
#
# SPDX-License-Identifier: Apache-2.0

"""
Exception types raised by skimread. The command line maps each family to
its own exit code.
"""


class RamError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(RamError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class ConfigError(RamError):
    pass


class DataError(RamError):
    pass


class NumericalError(RamError, ArithmeticError):
    pass
