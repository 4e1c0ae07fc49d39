"""
Exception hierarchy shared by every faalab module.

The CLI maps any FAAError to a non-zero exit code and prints its message.
"""

from typing import Dict, Optional


class FAAError(Exception):
    """Base class for all laboratory errors"""
    pass


class ShapeError(FAAError):
    """Raised when tensor or batch dimensions do not agree"""
    pass


class DegenerateInputError(FAAError):
    """Raised when input is well-shaped but mathematically unusable (zero norm, single class, ...)"""
    pass


class ContractError(FAAError):
    """Raised when a caller violates an operation's contract"""
    pass


class ConfigError(FAAError, ValueError):
    """Raised when a configuration value is invalid; the message names the field"""
    pass


class DatasetFormatError(FAAError):
    """Raised when a dataset blob has the wrong magic or version"""
    pass


class DatasetCorruptionError(FAAError):
    """Raised when a dataset directory is truncated or inconsistent with its manifest"""
    pass


class CheckpointFormatError(FAAError):
    """Raised when a checkpoint file cannot be decoded"""
    pass


class NonFiniteLossError(FAAError):
    """
    Raised when a training loss becomes NaN or infinite.

    Attributes:
        epoch: Epoch in which the loss diverged (1-based)
        batch: Batch index within the epoch (0-based)
        components: Loss components at the time of failure
    """

    def __init__(self, epoch: int, batch: int, components: Optional[Dict[str, float]] = None):
        self.epoch = epoch
        self.batch = batch
        self.components = dict(components or {})
        parts = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {parts}")

    def diagnostic(self) -> Dict[str, object]:
        """Structured record written by the CLI before exiting."""
        return {"epoch": self.epoch, "batch": self.batch, "components": self.components}
