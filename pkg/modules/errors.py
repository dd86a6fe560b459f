"""
errors.py — Exception hierarchy shared by every layer.

The CLI maps ConfigError / DataError to the validation exit code and
everything else derived from RealMixError to the runtime-abort exit code.
"""

from typing import Optional


class RealMixError(RuntimeError):
    """Base class for all toolkit failures."""


class ConfigError(RealMixError, ValueError):
    """A configuration value violates its documented constraint."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


class DataError(RealMixError, ValueError):
    """Dataset, split or tensor-container precondition failed."""


class ChecksumError(DataError):
    """A stored artifact does not match its recorded checksum."""


class NonFiniteLoss(RealMixError, FloatingPointError):
    """A loss term evaluated to NaN or ±inf."""

    def __init__(self, diagnostics: dict):
        super().__init__("non-finite loss: " + ", ".join(f"{k}={v}" for k, v in diagnostics.items()))
        self.diagnostics = diagnostics


class TrainingAborted(RealMixError):
    """Training hit a non-finite loss and stopped."""

    def __init__(self, step: int, diagnostics: dict, last_checkpoint: Optional[str] = None):
        detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        where = last_checkpoint or "none"
        super().__init__(f"non-finite loss at step {step} ({detail}); last checkpoint: {where}")
        self.step = step
        self.diagnostics = diagnostics
        self.last_checkpoint = last_checkpoint
