"""
MISFIT-V Fusion - Command line

Usage:
    python run_pipeline.py generate-data --out data/synthetic --count 64 --size 64x64
    python run_pipeline.py train --config configs/smoke.json
    python run_pipeline.py fuse --checkpoint outputs/smoke/final.mfck --visual a_rgb.png --thermal a_ir.png --out fused.png
    python run_pipeline.py evaluate --checkpoint outputs/smoke/final.mfck --data data/synthetic --out report.json
    python run_pipeline.py ablate --config configs/smoke.json --variants l1_weight_1,no_kl,no_attention --out outputs/ablation
    python run_pipeline.py gradcheck --seed 0
    python run_pipeline.py compare --reports a.json b.json --labels ours theirs --out outputs/compare

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import cv2
import numpy as np
import pandas as pd

from src.charts import (chart_paths_exist, save_image, training_curve_figure, write_figure, write_heatmap,
                        write_metric_charts, write_panel)
from src.checkpoint import load_checkpoint
from src.config import VARIANTS, load_config
from src.cross_attention import attention_heatmap
from src.data_pipeline import (ImagePair, MisalignmentSpec, load_dataset, load_image_pair,
                               load_scene_truths, preprocess_pair, read_image, split_dataset,
                               write_synthetic_corpus)
from src.errors import MisfitError, ShapeError, TrainingAborted, ValidationError
from src.fusion_metrics import (aggregate_reports, build_comparison, evaluate_fusion, hotspot_hit_rate,
                                load_report, save_report)
from src.fusion_networks import generator_forward
from src.trainer import (GRADCHECK_THRESHOLD, evaluate_generator, gradient_check, models_from_checkpoint,
                         run_ablation, train)
from src.utils import (SEED_ENV_VAR, ensure_writable_dir, logger, parse_size, resolve_seed, save_json,
                       save_table)

NETWORK_MIN_SIDE = 64


@dataclass
class CommandResult:
    exit_code: int
    artifacts: List[str] = field(default_factory=list)
    summary: List[str] = field(default_factory=list)


def _verified(artifacts: List[str], summary: List[str]) -> CommandResult:
    missing = [p for p in artifacts if not chart_paths_exist([p])]
    if missing:
        return CommandResult(2, artifacts, summary + [f"✗ Missing artifacts: {', '.join(missing)}"])
    return CommandResult(0, artifacts, summary)


def _seed_overrides(seed: Optional[int]) -> List[str]:
    return [f"seed={seed}"] if seed is not None else []


def _env_seed() -> Optional[int]:
    """MISFIT_SEED, applied only below --seed and the config file's own seed."""
    return resolve_seed(None) if os.environ.get(SEED_ENV_VAR) else None


# ===== generate-data =====

def cmd_generate_data(args) -> CommandResult:
    h, w = parse_size(args.size)
    spec = MisalignmentSpec.parse(args.misalign)
    seed = resolve_seed(args.seed)
    if args.count < 1:
        raise ValidationError(f"--count must be >= 1, got {args.count}")
    ensure_writable_dir(args.out)

    summary = []
    if min(h, w) < NETWORK_MIN_SIDE:
        message = (f"⚠ Size {h}x{w} is below the {NETWORK_MIN_SIDE}-pixel minimum of the default network; "
                   f"data is still produced")
        logger.warning(message)
        summary.append(message)

    manifest = write_synthetic_corpus(args.out, args.count, h, w, args.blobs, spec, seed,
                                      randomize=args.randomize)
    out = Path(args.out)
    artifacts = []
    for item in manifest['items']:
        artifacts += [str(out / f"{item['stem']}_rgb.png"), str(out / f"{item['stem']}_ir.png")]
    artifacts.append(str(out / 'manifest.json'))
    summary.append(f"✓ Wrote {args.count} pairs ({h}x{w}, seed {seed}) to {out}")
    return _verified(artifacts, summary)


# ===== train =====

def cmd_train(args) -> CommandResult:
    overrides = list(args.override or [])
    if args.data:
        overrides.append(f"data.dataset_dir={args.data}")
    if args.out:
        overrides.append(f"output_dir={args.out}")
    overrides += _seed_overrides(args.seed)
    config = load_config(args.config, overrides, fallback_seed=_env_seed())

    resume = load_checkpoint(args.resume) if args.resume else None
    pairs = load_dataset(config.data.dataset_dir, config.resolution[0], config.resolution[1],
                         config.architecture.size_factor)
    if len(pairs) < 2:
        raise ValidationError(f"Dataset {config.data.dataset_dir} needs at least 2 pairs, found {len(pairs)}")
    split = split_dataset(pairs, config.data.train_ratio, config.seed)

    try:
        ckpt, history = train(config, split, config.output_dir, resume_from=resume, max_steps=args.max_steps)
    except TrainingAborted as e:
        return CommandResult(2, [e.checkpoint_path] if e.checkpoint_path else [],
                             [f"✗ {e}", f"Last checkpoint: {e.checkpoint_path or 'none'}"])

    out = config.output_dir
    artifacts = [os.path.join(out, 'final.mfck'), os.path.join(out, 'training_log.csv')]
    if history.validation:
        artifacts.append(os.path.join(out, 'validation_reports.json'))
    if history.rows:
        artifacts.append(write_figure(training_curve_figure(history.to_frame()),
                                      os.path.join(out, 'training_curves.png')))
    summary = [f"✓ Trained {len(history.rows)} steps ({config.ablation}); final total loss "
               f"{history.totals[-1]:.4f}" if history.rows else "✓ Nothing left to train"]
    return _verified(artifacts, summary)


# ===== fuse =====

def _checkpoint_size(ckpt, requested: Optional[str]):
    h, w = ckpt.config.resolution
    if requested:
        rh, rw = parse_size(requested)
        if (rh, rw) != (h, w):
            raise ValidationError(
                f"Checkpoint was trained at {h}x{w}; --size {rh}x{rw} does not match (use --size {h}x{w} or omit it)"
            )
    return h, w


def cmd_fuse(args) -> CommandResult:
    ckpt = load_checkpoint(args.checkpoint)
    h, w = _checkpoint_size(ckpt, args.size)
    pair = load_image_pair(args.visual, args.thermal)
    pair = preprocess_pair(pair, h, w, ckpt.config.architecture.size_factor)
    models = models_from_checkpoint(ckpt)
    if args.heatmaps and not ckpt.config.effective_architecture().use_attention:
        raise ValidationError("Checkpoint was trained without cross-attention; it has no heatmaps")

    fused, maps, _ = generator_forward(pair, models.generator)
    artifacts = [save_image(fused.pixels, args.out)]
    summary = [f"✓ Fused {args.visual} + {args.thermal} -> {args.out} ({h}x{w})"]

    if args.heatmaps:
        factor = ckpt.config.architecture.downsample_factor
        grid = (h // factor, w // factor)
        for name, attention in zip(('rgb_to_ir', 'ir_to_rgb'), maps):
            heat = attention_heatmap(attention, grid)
            artifacts.append(write_heatmap(heat, os.path.join(args.heatmaps, f"heatmap_{name}.png"), size=(h, w)))
        summary.append(f"✓ Wrote 2 attention heatmaps to {args.heatmaps}")
    return _verified(artifacts, summary)


# ===== evaluate =====

def _read_fused(directory: str, stem: str, h: int, w: int) -> np.ndarray:
    path = os.path.join(directory, f"{stem}_fused.png")
    pixels = read_image(path)
    if pixels.shape[2] == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    if pixels.shape[:2] != (h, w):
        pixels = np.clip(cv2.resize(pixels, (w, h), interpolation=cv2.INTER_LINEAR), 0.0, 1.0)
    return pixels.astype(np.float32)


def _hotspot_masks(data_dir: str, pairs: Sequence[ImagePair], h: int, w: int) -> Dict[str, np.ndarray]:
    truths = load_scene_truths(data_dir)
    masks = {}
    for pair in pairs:
        if pair.stem not in truths:
            continue
        truth, (sh, sw) = truths[pair.stem]
        mask = truth.blob_mask(sh, sw, warped=False) | truth.blob_mask(sh, sw, warped=True)
        if (sh, sw) != (h, w):
            mask = cv2.resize(mask.astype(np.uint8), (w, h), interpolation=cv2.INTER_NEAREST).astype(bool)
        masks[pair.stem] = mask
    return masks


def cmd_evaluate(args) -> CommandResult:
    if not args.checkpoint and not args.fused_dir:
        raise ValidationError("evaluate needs --checkpoint or --fused-dir")
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if ckpt is not None:
        h, w = _checkpoint_size(ckpt, args.size)
        factor = ckpt.config.architecture.size_factor
    else:
        h, w = parse_size(args.size or '256x256')
        factor = 1
    pairs = load_dataset(args.data, h, w, factor)
    if not pairs:
        raise ValidationError(f"Dataset {args.data} is empty")

    models = models_from_checkpoint(ckpt) if ckpt is not None else None
    label = args.label or (Path(args.checkpoint).stem if ckpt is not None else Path(args.fused_dir).name)

    fused_images, items = [], []
    for pair in pairs:
        if args.fused_dir:
            fused = _read_fused(args.fused_dir, pair.stem, h, w)
        else:
            fused = generator_forward(pair, models.generator)[0].pixels
        fused_images.append(fused)
        items.append(evaluate_fusion(fused, pair, metadata={'stem': pair.stem}))

    metadata = {'run_id': label, 'dataset_id': str(args.data),
                'checkpoint_step': ckpt.step if ckpt is not None else None}
    masks = _hotspot_masks(args.data, pairs, h, w)
    if masks:
        chosen = [(f, masks[p.stem]) for f, p in zip(fused_images, pairs) if p.stem in masks]
        metadata['hotspot_hit_rate'] = hotspot_hit_rate([c[0] for c in chosen], [c[1] for c in chosen])
    report = aggregate_reports(items, metadata)

    rows = [dict({'stem': r.metadata['stem']}, **r.flat()) for r in items]
    artifacts = [save_report(report, args.out, items=rows),
                 save_table(pd.DataFrame(rows), str(Path(args.out).with_suffix('.csv')))]
    summary = [f"✓ Evaluated {len(items)} pairs ({label})"]
    for modality, values in (('thermal', report.vs_thermal), ('visual', report.vs_visual)):
        summary.append(f"  vs {modality}: " + ", ".join(f"{m} {v:.4f}" for m, v in values.items()))
    if 'hotspot_hit_rate' in metadata:
        summary.append(f"  hot-spot hit rate: {metadata['hotspot_hit_rate']:.0%}")

    if args.plot:
        table = build_comparison([report], normalize=False, labels=[label])
        artifacts += write_metric_charts(table, args.plot)
    if args.panels:
        for pair, fused in zip(pairs, fused_images):
            artifacts.append(write_panel(pair.thermal.pixels, pair.visual.pixels, fused,
                                         os.path.join(args.panels, f"{pair.stem}_panel.png")))
    return _verified(artifacts, summary)


# ===== ablate =====

def _parse_variants(text: str) -> List[str]:
    variants = [v.strip() for v in (text or '').split(',') if v.strip()]
    if not variants:
        raise ValidationError("No ablation variants given; nothing to compare")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValidationError(f"Unknown ablation variants: {', '.join(unknown)} (choose from {', '.join(VARIANTS)})")
    return variants


def _write_comparison(table, out_dir: str) -> List[str]:
    flat = table.frame.copy()
    flat.columns = [f"{m}_{mod}" for m, mod in flat.columns]
    flat.insert(0, 'run', flat.index)
    return [save_table(flat, os.path.join(out_dir, 'comparison.csv')),
            save_json(table.to_dict(), os.path.join(out_dir, 'comparison.json'))]


def cmd_ablate(args) -> CommandResult:
    variants = _parse_variants(args.variants)
    overrides = list(args.override or [])
    if args.data:
        overrides.append(f"data.dataset_dir={args.data}")
    overrides += _seed_overrides(args.seed)
    config = load_config(args.config, overrides, fallback_seed=_env_seed())

    pairs = load_dataset(config.data.dataset_dir, config.resolution[0], config.resolution[1],
                         config.architecture.size_factor)
    if len(pairs) < 2:
        raise ValidationError(f"Dataset {config.data.dataset_dir} needs at least 2 pairs, found {len(pairs)}")
    split = split_dataset(pairs, config.data.train_ratio, config.seed)
    eval_pairs = split.val or split.train
    out = str(ensure_writable_dir(args.out))

    logger.info("=" * 80)
    logger.info(f"ABLATION: base + {', '.join(variants)}")
    logger.info("=" * 80)

    base_ckpt, _ = train(config, split, os.path.join(out, 'base'))
    base_report, _ = evaluate_generator(models_from_checkpoint(base_ckpt), eval_pairs,
                                        metadata={'run_id': 'base', 'checkpoint_step': base_ckpt.step})

    reports, counts = [base_report], {}
    artifacts = [os.path.join(out, 'base', 'final.mfck')]
    for variant in variants:
        result = run_ablation(variant, config, split, out, base=(base_ckpt, base_report))
        reports.append(result.variant_report)
        counts.update(result.parameter_counts)
        artifacts.append(os.path.join(out, variant, 'final.mfck'))

    table = build_comparison(reports, normalize=True, labels=['base'] + variants)
    artifacts += _write_comparison(table, out)
    artifacts.append(save_json(counts, os.path.join(out, 'parameter_counts.json')))
    artifacts += write_metric_charts(table, os.path.join(out, 'charts'))

    summary = [f"✓ Ablation finished: {len(reports)} runs, comparison {table.shape[0]}x{table.shape[1]}"]
    summary += [f"  {label}: {count:,} generator parameters" for label, count in counts.items()]
    return _verified(artifacts, summary)


# ===== gradcheck =====

def cmd_gradcheck(args) -> CommandResult:
    seed = resolve_seed(args.seed)
    report = gradient_check(seed=seed, size=args.size, max_coords=args.max_coords)
    summary = [f"{group}: {error:.3e}" for group, error in report.errors.items()]
    if report.passed:
        summary.append(f"✓ All {len(report.errors)} parameter groups below {GRADCHECK_THRESHOLD:g}")
        return CommandResult(0, [], summary)
    summary.append(f"✗ {len(report.failing)} groups at or above {GRADCHECK_THRESHOLD:g}: {', '.join(report.failing)}")
    return CommandResult(2, [], summary)


# ===== compare =====

def cmd_compare(args) -> CommandResult:
    if not args.reports:
        raise ValidationError("compare needs at least one --reports file")
    reports = [load_report(path) for path in args.reports]
    labels = args.labels or [Path(p).stem for p in args.reports]
    table = build_comparison(reports, normalize=not args.raw, labels=labels)
    out = str(ensure_writable_dir(args.out))
    artifacts = _write_comparison(table, out) + write_metric_charts(table, out)
    return _verified(artifacts, [f"✓ Compared {len(reports)} runs: {', '.join(labels)}"])


# ===== parser =====

COMMANDS: Dict[str, Callable] = {
    'generate-data': cmd_generate_data,
    'train': cmd_train,
    'fuse': cmd_fuse,
    'evaluate': cmd_evaluate,
    'ablate': cmd_ablate,
    'gradcheck': cmd_gradcheck,
    'compare': cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    formatter = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(description='MISFIT-V visual-thermal fusion', formatter_class=formatter)
    parser.add_argument('--verbose', action='store_true', help='Debug logging')
    parser.add_argument('--quiet', action='store_true', help='Warnings and errors only')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate-data', help='Write a synthetic misaligned corpus', formatter_class=formatter)
    p.add_argument('--out', required=True, help='Output directory')
    p.add_argument('--count', type=int, default=64, help='Number of pairs')
    p.add_argument('--size', default='256x256', help='Scene size HxW')
    p.add_argument('--blobs', type=int, default=3, help='Hot spots per scene')
    p.add_argument('--misalign', default='0,0,0,1,0,0', help='dx,dy,rotation,scale,crop,noise')
    p.add_argument('--randomize', action='store_true', help='Sample each warp within the --misalign bounds')
    p.add_argument('--seed', type=int, default=None, help=f'Corpus seed (falls back to {SEED_ENV_VAR}, then 0)')

    p = sub.add_parser('train', help='Train a fusion model', formatter_class=formatter)
    p.add_argument('--config', default=None, help='JSON config file (defaults when omitted)')
    p.add_argument('--override', nargs='+', default=None, metavar='KEY=VALUE', help='Dotted config overrides')
    p.add_argument('--data', default=None, help='Dataset directory (overrides data.dataset_dir)')
    p.add_argument('--out', default=None, help='Output directory (overrides output_dir)')
    p.add_argument('--resume', default=None, help='Checkpoint to resume from')
    p.add_argument('--max-steps', type=int, default=None, help='Stop after this many total steps')
    p.add_argument('--seed', type=int, default=None, help=f'Override the config seed ({SEED_ENV_VAR} only fills a missing one)')

    p = sub.add_parser('fuse', help='Fuse one visual/thermal pair', formatter_class=formatter)
    p.add_argument('--checkpoint', required=True, help='Trained .mfck checkpoint')
    p.add_argument('--visual', required=True, help='Visual image')
    p.add_argument('--thermal', required=True, help='Thermal image')
    p.add_argument('--out', required=True, help='Fused PNG path')
    p.add_argument('--heatmaps', default=None, help='Directory for the two attention heatmaps')
    p.add_argument('--size', default=None, help='Expected resolution HxW (must match the checkpoint)')

    p = sub.add_parser('evaluate', help='Score fused images with the five metrics', formatter_class=formatter)
    p.add_argument('--checkpoint', default=None, help='Trained .mfck checkpoint')
    p.add_argument('--data', required=True, help='Dataset directory of <stem>_rgb / <stem>_ir pairs')
    p.add_argument('--out', required=True, help='Report JSON path (a per-item CSV is written beside it)')
    p.add_argument('--plot', default=None, help='Directory for the five metric charts')
    p.add_argument('--fused-dir', default=None, help='Evaluate existing <stem>_fused.png images instead')
    p.add_argument('--panels', default=None, help='Directory for thermal | visual | fused panels')
    p.add_argument('--size', default=None, help='Resolution HxW (from the checkpoint when omitted)')
    p.add_argument('--label', default=None, help='Run label used in the report and charts')

    p = sub.add_parser('ablate', help='Train base and ablation variants and compare them', formatter_class=formatter)
    p.add_argument('--config', default=None, help='JSON config file')
    p.add_argument('--override', nargs='+', default=None, metavar='KEY=VALUE', help='Dotted config overrides')
    p.add_argument('--variants', default=','.join(VARIANTS), help='Comma-separated variants')
    p.add_argument('--out', required=True, help='Output directory')
    p.add_argument('--data', default=None, help='Dataset directory (overrides data.dataset_dir)')
    p.add_argument('--seed', type=int, default=None, help=f'Override the config seed ({SEED_ENV_VAR} only fills a missing one)')

    p = sub.add_parser('gradcheck', help='Finite-difference gradient verification', formatter_class=formatter)
    p.add_argument('--seed', type=int, default=None, help=f'Seed (falls back to {SEED_ENV_VAR}, then 0)')
    p.add_argument('--size', type=int, default=16, help='Square input side')
    p.add_argument('--max-coords', type=int, default=8, help='Coordinates checked per parameter group')

    p = sub.add_parser('compare', help='Compare saved metric reports', formatter_class=formatter)
    p.add_argument('--reports', nargs='+', required=True, help='Report JSON files')
    p.add_argument('--labels', nargs='+', default=None, help='Row labels (file stems when omitted)')
    p.add_argument('--out', required=True, help='Output directory')
    p.add_argument('--raw', action='store_true', help='Skip max-abs normalisation')
    return parser


def run_command(args) -> CommandResult:
    """Dispatch a parsed command and map failures onto exit codes."""
    handler = COMMANDS[args.command]
    try:
        return handler(args)
    except (ValidationError, ShapeError, FileNotFoundError) as e:
        logger.error(f"✗ {e}")
        return CommandResult(1, [], [f"✗ {e}"])
    except (MisfitError, OSError, RuntimeError) as e:
        logger.error(f"✗ {e}")
        return CommandResult(2, [], [f"✗ {e}"])


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    elif args.quiet:
        logging.getLogger().setLevel(logging.WARNING)

    result = run_command(args)
    for line in result.summary:
        print(line)
    return result.exit_code


if __name__ == '__main__':
    sys.exit(main())
