"""
MISFIT-V Fusion Package

Unsupervised visual-thermal image fusion for misaligned pairs: a
cross-attention GAN generator, dual discriminators, KL/L1 losses, a
synthetic misaligned corpus and a five-metric evaluation.
"""

from .errors import (
    MisfitError,
    ValidationError,
    ShapeError,
    NumericError,
    CheckpointError,
    TrainingAborted
)

__all__ = [
    'MisfitError',
    'ValidationError',
    'ShapeError',
    'NumericError',
    'CheckpointError',
    'TrainingAborted'
]
