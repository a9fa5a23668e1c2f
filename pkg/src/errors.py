"""
MISFIT-V Fusion - Exception hierarchy

ValidationError and its subclasses signal bad user input (CLI exit code 1);
everything else is a runtime failure (exit code 2).
"""

from typing import Optional


class MisfitError(Exception):
    """Base class for all fusion pipeline errors."""


class ValidationError(MisfitError, ValueError):
    """Invalid user-supplied input or argument."""


class ConfigurationError(ValidationError):
    """Invalid configuration value, key or size."""


class IngestionError(ValidationError):
    """Dataset directory content that cannot be paired."""


class ImageFormatError(ValidationError):
    """Image file that cannot be decoded into a supported layout."""


class ShapeError(MisfitError, ValueError):
    """Tensor or image shape contract violated."""


class ModalityError(ShapeError):
    """Image fed to the discriminator of the other modality."""


class NumericError(MisfitError, ArithmeticError):
    """Non-finite value where a finite one is required."""


class GenerationError(MisfitError):
    """Synthetic scene parameters that cannot be realised."""


class CheckpointError(MisfitError):
    """Checkpoint could not be written or read."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint truncated, corrupted or not a checkpoint at all."""


class TrainingAborted(MisfitError):
    """Training stopped on a non-finite loss."""

    def __init__(self, step: int, component: str, checkpoint_path: Optional[str] = None):
        self.step = step
        self.component = component
        self.checkpoint_path = checkpoint_path
        message = f"Training aborted at step {step}: non-finite {component}"
        if checkpoint_path:
            message += f" (last good checkpoint: {checkpoint_path})"
        super().__init__(message)
