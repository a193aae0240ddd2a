"""
Exception hierarchy for switchdit.

Every error raised on purpose by the package derives from SwitchDiTError so
the command line can map it onto an exit code.
"""

from typing import Optional


class SwitchDiTError(Exception):
    """Base class for all switchdit errors."""


class ShapeError(SwitchDiTError, ValueError):
    """Operands have incompatible shapes for the requested operation."""


class NumericalError(SwitchDiTError, ArithmeticError):
    """A NaN or Inf showed up where finite values are required."""


class ConfigError(SwitchDiTError, ValueError):
    """Invalid configuration: bad dimensions, unknown keys, unsupported combos."""


class RoutingError(SwitchDiTError):
    """Gate outputs or permutations violate their structural invariants."""


class AblationDisabledError(SwitchDiTError):
    """An ablation-only operation was invoked while its flag is off."""


class CheckpointError(SwitchDiTError):
    """Base class for checkpoint read/write failures."""


class MissingCheckpointError(CheckpointError):
    """The checkpoint path does not exist."""


class CorruptCheckpointError(CheckpointError):
    """The checkpoint file is truncated or its header cannot be parsed."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written by an incompatible format version."""

    def __init__(self, found: str, expected: str):
        super().__init__(
            f"Unsupported checkpoint version '{found}' (expected '{expected}')"
        )
        self.found = found
        self.expected = expected


class CheckpointShapeError(CheckpointError):
    """Stored arrays do not match the shapes implied by the stored config."""


class TrainingDivergedError(NumericalError):
    """The training loss became non-finite."""

    def __init__(self, step: int, batch_seed: tuple, detail: Optional[str] = None):
        message = f"Non-finite loss at step {step} (batch seed {list(batch_seed)})"
        if detail:
            message += f": {detail}"
        super().__init__(message)
        self.step = step
        self.batch_seed = batch_seed


class TimestepError(SwitchDiTError, ValueError):
    """A diffusion timestep lies outside 1..T."""


class DistributionError(SwitchDiTError, ValueError):
    """A probability vector has negative entries or does not sum to one."""
