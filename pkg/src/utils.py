"""
MISFIT-V Fusion - Utility Functions
Shared logging, seeding and file helpers used by every stage of the pipeline.
"""

import json
import logging
import os
import random
from pathlib import Path
from typing import Any, Optional, Tuple

import numpy as np
import pandas as pd
import torch

from src.errors import ConfigurationError

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

SEED_ENV_VAR = 'MISFIT_SEED'


def derive_seed(seed: int, index: int) -> int:
    """
    Derive an independent per-item seed from a run seed.

    Examples:
        derive_seed(7, 0) != derive_seed(7, 1)
        derive_seed(7, 3) == derive_seed(7, 3)
    """
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(1)
    return int(state[0])


def resolve_seed(seed: Optional[int], default: int = 0) -> int:
    """
    Resolve the effective seed: explicit value, then MISFIT_SEED, then default.

    Args:
        seed: Explicit seed (None when not given on the command line)
        default: Fallback when neither is set

    Returns:
        Integer seed
    """
    if seed is not None:
        return int(seed)
    env_value = os.environ.get(SEED_ENV_VAR)
    if env_value:
        try:
            return int(env_value)
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV_VAR} must be an integer, got {env_value!r}")
    return default


def seed_everything(seed: int):
    """Seed python, numpy and torch and pin deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def parse_size(text: str) -> Tuple[int, int]:
    """
    Parse an 'HxW' size string.

    Examples:
        '256x256' -> (256, 256)
        '64X48' -> (64, 48)
    """
    parts = text.lower().split('x')
    if len(parts) != 2:
        raise ConfigurationError(f"Size must look like HxW, got {text!r}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigurationError(f"Size must look like HxW, got {text!r}")
    if h <= 0 or w <= 0:
        raise ConfigurationError(f"Size must be positive, got {text!r}")
    return h, w


def ensure_writable_dir(path: str) -> Path:
    """
    Create a directory if needed and check it can be written.

    Raises:
        ConfigurationError: if the directory cannot be created or written
    """
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigurationError(f"Cannot create output directory {directory}: {e}")
    if not os.access(directory, os.W_OK):
        raise ConfigurationError(f"Output directory is not writable: {directory}")
    return directory


def save_json(payload: Any, filepath: str) -> str:
    """
    Save a JSON document, creating the parent directory.

    Args:
        payload: JSON-serialisable object
        filepath: Output path

    Returns:
        The written path
    """
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    with open(filepath, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=False)
    logger.info(f"Saved JSON to: {filepath}")
    return filepath


def load_json(filepath: str) -> Any:
    """Load a JSON document with a clear error for missing files."""
    if not os.path.exists(filepath):
        raise FileNotFoundError(f"File not found: {filepath}")
    with open(filepath) as f:
        return json.load(f)


def save_table(df: pd.DataFrame, filepath: str) -> str:
    """
    Save a dataframe to CSV.

    Floats are written with full repr precision so rows reload bit-exactly.
    """
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
    df.to_csv(filepath, index=False)
    logger.info(f"Saved table to: {filepath}")
    return filepath
