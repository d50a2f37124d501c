#!/usr/bin/env python3
#
# This Source Code Form is subject to the terms of the Mozilla Public
# License, v. 2.0. If a copy of the MPL was not distributed with this
# file, You can obtain one at http://mozilla.org/MPL/2.0/.
#

"""The errors module provides the exception types shared by all workbench modules."""

from typing import List
from typing import Tuple
from typing import Type


class WorkbenchError(Exception):
    """Base class of all errors raised on purpose by the workbench."""


class ShapeError(WorkbenchError, ValueError):
    """Matrix dimensions do not conform."""


class NumericError(WorkbenchError, ArithmeticError):
    """An operation produced NaN or Inf."""


class DeterminismError(WorkbenchError):
    """A function that must be deterministic returned different values for the same input."""


class InputError(WorkbenchError, ValueError):
    """Input data is empty or malformed."""


class RangeError(WorkbenchError, ValueError):
    """A step, budget or similar index is outside its valid range."""


class LengthError(WorkbenchError, ValueError):
    """A token sequence is longer than the model supports."""


class TargetIndexError(WorkbenchError, IndexError):
    """A class index is outside the logits width."""


class StateError(WorkbenchError, RuntimeError):
    """The object is in the wrong state for the requested operation."""


class TargetLookupError(WorkbenchError, LookupError):
    """A (layer, matrix) target does not exist in the model."""


class AdapterLoadError(WorkbenchError, ValueError):
    """An adapter file does not match the model it is loaded onto."""


class UndefinedMetricError(WorkbenchError, ArithmeticError):
    """A metric is mathematically undefined for its inputs."""


class DivergenceError(WorkbenchError, ArithmeticError):
    """Training produced a non-finite loss."""
    def __init__(self, step: int, message: str = "") -> None:
        self.step = step
        super().__init__("training diverged at step %d%s" % (step, ": " + message if message else ""))


class ConfigError(WorkbenchError, ValueError):
    """A configuration value is missing or invalid."""
    def __init__(self, field: str, message: str) -> None:
        self.field = field
        super().__init__("%s: %s" % (field, message))


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def exit_code_for(error: BaseException) -> int:
    """Maps an exception to the process exit code of the command line interface."""
    table: List[Tuple[Type[BaseException], int]] = [
        (ConfigError, EXIT_CONFIG),
        (DivergenceError, EXIT_DIVERGENCE),
        (OSError, EXIT_IO),
        (InputError, EXIT_IO),
        (AdapterLoadError, EXIT_IO),
    ]
    for error_type, code in table:
        if isinstance(error, error_type):
            return code
    return 1

# vim:set shiftwidth=4 softtabstop=4 expandtab:
