"""
Exception hierarchy shared by the solver, trainer and command-line runner.
"""
from typing import Optional

import numpy as np


class PigError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(PigError):
    """Invalid user-supplied configuration or call arguments."""


class NumericOverflowError(PigError):
    """A primitive produced a non-finite value."""

    def __init__(self, op: str, message: Optional[str] = None):
        self.op = op
        super().__init__(message or f"non-finite result in '{op}'")


class ContractViolationError(PigError):
    """A caller broke a documented precondition."""


class InvariantViolationError(PigError):
    """A structural invariant (e.g. SPD covariance) does not hold."""


class TrainingDivergedError(PigError):
    """Loss became non-finite or exceeded the divergence threshold."""

    def __init__(self, iteration: int, loss: float, params: Optional[np.ndarray] = None):
        self.iteration = iteration
        self.loss = loss
        self.params = params
        super().__init__(f"training diverged at iteration {iteration} (loss={loss!r})")


class UnsupportedError(PigError):
    """Requested operation is not available for this problem."""


class UndefinedMetricError(PigError):
    """Metric is undefined for the given inputs."""


class SolverInstabilityError(PigError):
    """A reference solver detected growth that violates the maximum principle."""


class CheckpointError(PigError):
    """Checkpoint could not be read or written."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint bytes are truncated or malformed."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version differs from the supported one."""

    def __init__(self, found: int, supported: int):
        self.found = found
        self.supported = supported
        super().__init__(
            f"checkpoint format version {found} is not supported (expected version {supported})"
        )


class OutputLockedError(PigError):
    """Another run holds the output directory lock."""
