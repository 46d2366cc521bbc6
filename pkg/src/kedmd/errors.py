"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific class that applies.
"""

from __future__ import annotations


class KedmdError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(KedmdError):
    """Invalid configuration; the message names the offending field path."""


class DegenerateKernelError(KedmdError):
    """Kernel or Gram matrix has collapsed (zero weight mass, empty sum,
    vanishing dictionary norm, no singular values above the cutoff)."""


class NumericError(KedmdError):
    """A computation produced non-finite values or hit a guarded division."""


class VariantError(KedmdError):
    """Operation requires data only present on the other model variant."""


class DivergedError(KedmdError):
    """A simulated or predicted trajectory left the finite range.

    Carries the number of completed (finite) steps and the finite prefix of
    the trajectory so callers can flag and still export partial results.
    """

    def __init__(self, message, steps_completed, trajectory=None):
        super().__init__(message)
        self.steps_completed = steps_completed
        self.trajectory = trajectory


class TrainingAbortError(KedmdError):
    """Training hit a non-finite loss or gradient and stopped.

    Carries the epoch/batch coordinates of the failure and the last finite
    parameter vector.
    """

    def __init__(self, message, epoch, batch, last_params):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.last_params = last_params
