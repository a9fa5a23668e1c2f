"""
MISFIT-V Fusion - Pipeline entry point

Generates synthetic misaligned pairs, trains and ablates the fusion GAN,
fuses new pairs and evaluates fused images.

Usage:
    python run_pipeline.py <command> [options]

Commands:
    generate-data  Write a synthetic visual/thermal corpus with manifest
    train          Train a fusion model from a JSON config
    fuse           Fuse one pair (optionally writing attention heatmaps)
    evaluate       Five-metric report, charts and panels for a dataset
    ablate         Base run plus ablation variants with a comparison table
    gradcheck      Finite-difference verification of the training gradients
    compare        Normalized comparison of saved reports

Run `python run_pipeline.py <command> --help` for the options of each command.
"""

import os
import sys

# Add src to path
sys.path.append(os.path.dirname(__file__))

from src.cli import main


if __name__ == '__main__':
    sys.exit(main())
