"""
MISFIT-V Fusion - Training

Alternating discriminator/generator optimisation, the training log,
periodic checkpoints with mid-epoch resume, finite-difference gradient
verification and the ablation harness.

Usage:
    trainer = FusionTrainer(config, split, output_dir='outputs/run')
    checkpoint, history = trainer.run()
"""

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from src.checkpoint import EXTENSION, Checkpoint, capture_state, restore_state, save_checkpoint
from src.config import TrainingConfig
from src.data_pipeline import DatasetSplit, ImagePair, batch_iterator, collate, count_batches
from src.errors import NumericError, TrainingAborted, ValidationError
from src.fusion_metrics import MetricReport, aggregate_reports, build_comparison, ComparisonTable, evaluate_fusion
from src.fusion_networks import ArchitectureConfig, FusionModels, count_parameters, generator_forward, init_params
from src.losses import (LossBreakdown, LossWeights, adversarial_loss_discriminator, adversarial_loss_generator,
                        l1_loss, soft_kl_loss, total_loss)
from src.utils import ensure_writable_dir, logger, save_json, save_table, seed_everything

LOG_COLUMNS = ['step', 'adv_ir', 'adv_rgb', 'gen', 'kl', 'l1', 'total']
GRADCHECK_THRESHOLD = 1e-4
GRADCHECK_STEP = 1e-6
GRADCHECK_ZERO_SCALE = 1e-8

Batch = Union[Sequence[ImagePair], Tuple[torch.Tensor, torch.Tensor]]


@dataclass
class TrainingHistory:
    """Per-step loss rows and per-epoch validation reports."""

    rows: List[Dict[str, float]] = field(default_factory=list)
    validation: List[MetricReport] = field(default_factory=list)

    def record(self, step: int, breakdown: LossBreakdown):
        if self.rows and step <= self.rows[-1]['step']:
            raise ValidationError(f"Step {step} is not after the last logged step {self.rows[-1]['step']}")
        self.rows.append(breakdown.as_row(step))

    @property
    def totals(self) -> List[float]:
        return [row['total'] for row in self.rows]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)


def build_optimizers(models: FusionModels, config: TrainingConfig,
                     learning_rate: Optional[float] = None) -> Dict[str, torch.optim.Optimizer]:
    """One Adam optimizer per network, sharing the learning rate and betas."""
    lr = config.learning_rate if learning_rate is None else learning_rate
    betas = (config.optimizer.beta1, config.optimizer.beta2)
    return {name: torch.optim.Adam(module.parameters(), lr=lr, betas=betas)
            for name, module in models.named_modules().items()}


def _to_tensors(batch: Batch, dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], torch.Tensor):
        return batch[0].to(dtype), batch[1].to(dtype)
    return collate(batch, dtype=dtype)


def _scalar(value: torch.Tensor, step: int, component: str) -> float:
    number = float(value.detach())
    if not math.isfinite(number):
        raise TrainingAborted(step, component)
    return number


def generator_objective(models: FusionModels, visual: torch.Tensor, thermal: torch.Tensor,
                        fused: torch.Tensor, weights: LossWeights, bins: int, epsilon: float,
                        step: int = 0) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Generator-phase losses with fresh discriminator evaluations of `fused`.

    Returns:
        (total, gen, kl, l1) tensors; total stays in the autograd graph
    """
    d_ir = models.disc_ir(thermal, fused).score
    d_rgb = models.disc_rgb(visual, fused).score
    gen = adversarial_loss_generator(d_ir, d_rgb, weights)
    kl = soft_kl_loss(fused, thermal, visual, bins, epsilon)
    l1 = l1_loss(fused, thermal, visual)
    try:
        total = total_loss(gen, kl, l1, weights)
    except NumericError as e:
        component = next(n for n, v in (('gen', gen), ('kl', kl), ('l1', l1)) if not torch.isfinite(v).all())
        raise TrainingAborted(step, component) from e
    return total, gen, kl, l1


def train_step(batch: Batch, models: FusionModels, optimizers: Dict[str, torch.optim.Optimizer],
               config: TrainingConfig, step: int = 0) -> LossBreakdown:
    """
    One optimisation step.

    Order: generator forward; IR discriminator update on (thermal, rep3 thermal)
    vs (thermal, fused detached); RGB discriminator update on (visual, visual)
    vs (visual, fused detached); generator update on the weighted total.

    Raises:
        TrainingAborted: on a non-finite loss, naming the step and component
    """
    weights = config.effective_weights()
    visual, thermal = _to_tensors(batch, next(models.generator.parameters()).dtype)
    models.train()

    # 1. Generator forward
    fused = models.generator(visual, thermal).fused
    fused_const = fused.detach()

    # 2. IR discriminator
    optimizers['disc_ir'].zero_grad(set_to_none=True)
    real_ir = models.disc_ir(thermal, thermal.expand(-1, 3, -1, -1)).score
    fake_ir = models.disc_ir(thermal, fused_const).score
    adv_ir = adversarial_loss_discriminator(real_ir, fake_ir)
    adv_ir_value = _scalar(adv_ir, step, 'adv_ir')
    adv_ir.backward()
    optimizers['disc_ir'].step()

    # 3. RGB discriminator
    optimizers['disc_rgb'].zero_grad(set_to_none=True)
    real_rgb = models.disc_rgb(visual, visual).score
    fake_rgb = models.disc_rgb(visual, fused_const).score
    adv_rgb = adversarial_loss_discriminator(real_rgb, fake_rgb)
    adv_rgb_value = _scalar(adv_rgb, step, 'adv_rgb')
    adv_rgb.backward()
    optimizers['disc_rgb'].step()

    # 4. Generator
    optimizers['generator'].zero_grad(set_to_none=True)
    total, gen, kl, l1 = generator_objective(models, visual, thermal, fused, weights,
                                             config.kl_bins, config.kl_epsilon, step)
    gen_value = _scalar(gen, step, 'gen')
    kl_value = _scalar(kl, step, 'kl')
    l1_value = _scalar(l1, step, 'l1')
    total.backward()
    optimizers['generator'].step()

    return LossBreakdown(
        adv_ir=adv_ir_value,
        adv_rgb=adv_rgb_value,
        gen=gen_value,
        kl=kl_value,
        l1=l1_value,
        total=LossBreakdown.compose_total(gen_value, kl_value, l1_value, weights),
    )


def models_from_checkpoint(ckpt: Checkpoint) -> FusionModels:
    """Rebuild the networks a checkpoint was trained with and load its weights."""
    config = ckpt.config
    models = init_params(config.seed, config.effective_architecture()).to(config.dtype)
    restore_state(ckpt, models)
    models.eval()
    return models


def evaluate_generator(models: FusionModels, pairs: Sequence[ImagePair],
                       metadata: Optional[Dict] = None) -> Tuple[MetricReport, List[MetricReport]]:
    """Fuse and score every pair; returns (aggregate, per-item reports)."""
    if not pairs:
        raise ValidationError("No pairs to evaluate")
    models.eval()
    items = []
    for pair in pairs:
        fused, _, _ = generator_forward(pair, models.generator)
        items.append(evaluate_fusion(fused, pair, metadata={'stem': pair.stem}))
    return aggregate_reports(items, metadata), items


class FusionTrainer:
    """Owns the networks, optimizers and history of one training run."""

    def __init__(self, config: TrainingConfig, dataset: DatasetSplit, output_dir: Optional[str] = None,
                 resume_from: Optional[Checkpoint] = None):
        self.config = config.validate()
        self.dataset = dataset
        self.output_dir = str(ensure_writable_dir(output_dir)) if output_dir else None
        if not dataset.train:
            raise ValidationError("Training split is empty")

        seed_everything(config.seed)
        self.models = init_params(config.seed, config.effective_architecture()).to(config.dtype)
        self.optimizers = build_optimizers(self.models, config)
        self.history = TrainingHistory()
        self.step = 0
        self.start_epoch = 0
        self.start_batch = 0
        self.last_checkpoint_path: Optional[str] = None
        self._last_good: Optional[Checkpoint] = None

        if resume_from is not None:
            self._resume(resume_from)

    def _resume(self, ckpt: Checkpoint):
        restore_state(ckpt, self.models, self.optimizers)
        self.step = ckpt.step
        self.start_epoch = ckpt.epoch
        self.start_batch = ckpt.batch_index
        self.history.rows = [dict(row) for row in ckpt.extras.get('history', [])]
        self.history.validation = [MetricReport.from_dict(r) for r in ckpt.extras.get('validation', [])]
        logger.info(f"Resuming at step {self.step} (epoch {self.start_epoch + 1}, batch {self.start_batch})")

    def snapshot(self, epoch: int, batch_index: int) -> Checkpoint:
        extras = {
            'history': self.history.rows,
            'validation': [r.to_dict() for r in self.history.validation],
        }
        return capture_state(self.models, self.optimizers, self.config, self.step,
                             epoch=epoch, batch_index=batch_index, extras=extras)

    def _save(self, ckpt: Checkpoint, name: str) -> Optional[str]:
        if self.output_dir is None:
            return None
        path = save_checkpoint(ckpt, os.path.join(self.output_dir, name + EXTENSION))
        self.last_checkpoint_path = path
        return path

    def _abort(self, error: TrainingAborted):
        logger.error(f"✗ {error}")
        path = None
        if self._last_good is not None and self.output_dir is not None:
            path = save_checkpoint(self._last_good, os.path.join(self.output_dir, 'last_good' + EXTENSION))
        elif self.last_checkpoint_path:
            path = self.last_checkpoint_path
        self.write_log()
        raise TrainingAborted(error.step, error.component, path) from error

    def validate_epoch(self, epoch: int) -> Optional[MetricReport]:
        if not self.dataset.val:
            return None
        report, _ = evaluate_generator(self.models, self.dataset.val,
                                       metadata={'run_id': self.config.ablation, 'epoch': epoch + 1,
                                                 'checkpoint_step': self.step})
        self.history.validation.append(report)
        logger.info(f"Validation after epoch {epoch + 1}: "
                    f"PSNR thermal {report.vs_thermal['PSNR']:.2f} dB, visual {report.vs_visual['PSNR']:.2f} dB")
        return report

    def write_log(self):
        if self.output_dir is None:
            return
        save_table(self.history.to_frame(), os.path.join(self.output_dir, 'training_log.csv'))
        if self.history.validation:
            save_json([r.to_dict() for r in self.history.validation],
                      os.path.join(self.output_dir, 'validation_reports.json'))

    def run(self, max_steps: Optional[int] = None) -> Tuple[Checkpoint, TrainingHistory]:
        """
        Train for the configured epochs (or until max_steps total steps).

        Returns:
            (final Checkpoint, TrainingHistory)
        """
        config = self.config
        n_batches = count_batches(len(self.dataset.train), config.batch_size)

        logger.info("=" * 80)
        logger.info(f"TRAINING: ablation={config.ablation}, {config.resolution[0]}x{config.resolution[1]}")
        logger.info("=" * 80)
        logger.info(f"Train pairs: {len(self.dataset.train)}, validation pairs: {len(self.dataset.val)}")
        logger.info(f"Epochs: {config.epochs}, batches per epoch: {n_batches}, batch size: {config.batch_size}")
        logger.info(f"Generator parameters: {count_parameters(self.models.generator):,}")

        epoch, batch_index = self.start_epoch, self.start_batch
        stopped = False
        for epoch in range(self.start_epoch, config.epochs):
            first = self.start_batch if epoch == self.start_epoch else 0
            for batch_index, batch in enumerate(batch_iterator(self.dataset.train, config.batch_size,
                                                               config.seed, epoch)):
                if batch_index < first:
                    continue
                try:
                    breakdown = train_step(batch, self.models, self.optimizers, config, self.step)
                except TrainingAborted as e:
                    self._abort(e)
                self.history.record(self.step, breakdown)
                self.step += 1

                if config.log_every and self.step % config.log_every == 0:
                    logger.info(f"step {self.step}: total {breakdown.total:.4f} "
                                f"(gen {breakdown.gen:.4f}, kl {breakdown.kl:.4f}, l1 {breakdown.l1:.4f})")
                self._last_good = self.snapshot(epoch, batch_index + 1)
                if config.checkpoint_every and self.step % config.checkpoint_every == 0:
                    self._save(self._last_good, f"step_{self.step:06d}")
                if max_steps is not None and self.step >= max_steps:
                    stopped = True
                    break
            if stopped:
                break
            self.validate_epoch(epoch)
            self._save(self.snapshot(epoch + 1, 0), 'latest')

        if stopped:
            final = self.snapshot(epoch, batch_index + 1)
        else:
            final = self.snapshot(config.epochs, 0)
        self._save(final, 'final')
        self.write_log()
        logger.info(f"✓ Training finished after {self.step} steps")
        return final, self.history


def train(config: TrainingConfig, dataset: DatasetSplit, output_dir: Optional[str] = None,
          resume_from: Optional[Checkpoint] = None, max_steps: Optional[int] = None) -> Tuple[Checkpoint, TrainingHistory]:
    """Train one run; see FusionTrainer."""
    return FusionTrainer(config, dataset, output_dir, resume_from).run(max_steps=max_steps)


# ===== Gradient verification =====

def tiny_architecture() -> ArchitectureConfig:
    """Smallest wired-up network: width 4, one down block, smooth activations."""
    return ArchitectureConfig(base_width=4, down_blocks=1, d_model=8, n_heads=2, unet_depth=2,
                              unet_width=4, disc_width=4, disc_layers=2, activation='gelu')


@dataclass
class GradientReport:
    errors: Dict[str, float]
    threshold: float = GRADCHECK_THRESHOLD

    @property
    def failing(self) -> List[str]:
        return [name for name, err in self.errors.items() if not err < self.threshold]

    @property
    def passed(self) -> bool:
        return not self.failing

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def analytic_gradients(models: FusionModels, loss_fn: Callable[[], torch.Tensor]) -> Dict[str, torch.Tensor]:
    for module in models.named_modules().values():
        module.zero_grad(set_to_none=True)
    loss_fn().backward()
    grads = {}
    for prefix, module in models.named_modules().items():
        for name, param in module.named_parameters():
            grad = param.grad if param.grad is not None else torch.zeros_like(param)
            grads[f"{prefix}.{name}"] = grad.detach().clone()
    return grads


def _pick_coords(gradient: np.ndarray, max_coords: int, rng: np.random.Generator) -> np.ndarray:
    """Half the coordinates with the largest |gradient|, the rest drawn at random."""
    n = gradient.size
    if n <= max_coords:
        return np.arange(n)
    top = np.argsort(-np.abs(gradient), kind='stable')[:max(1, max_coords // 2)]
    rest = np.setdiff1d(np.arange(n), top)
    extra = rng.choice(rest, size=max_coords - top.size, replace=False)
    return np.concatenate([top, extra])


def richardson_derivative(fn: Callable[[float], float], x: float, step: float) -> float:
    """
    Central difference at step and step / 2 combined to cancel the h^2 error term.

    Examples:
        fn = x**4 at x = 1, step 1e-2 -> 4 (plain central difference gives 4.0004)
    """
    coarse = (fn(x + step) - fn(x - step)) / (2.0 * step)
    half = step / 2.0
    fine = (fn(x + half) - fn(x - half)) / (2.0 * half)
    return (4.0 * fine - coarse) / 3.0


def gradient_check(config: Optional[ArchitectureConfig] = None, seed: int = 0, size: int = 16,
                   step: float = GRADCHECK_STEP, max_coords: int = 8,
                   weights: Optional[LossWeights] = None, bins: int = 16) -> GradientReport:
    """
    Compare autograd gradients of the generator-phase total loss against
    central finite differences, in double precision.

    Every parameter tensor of the generator and both discriminators is a
    group; up to max_coords coordinates per group are perturbed and
    differentiated with Richardson-extrapolated central differences. The
    group error is max|analytic - numeric| / max(max|analytic|, max|numeric|),
    or the absolute difference when both are below the scale the loss can
    resolve at this step (never below 1e-8).

    Returns:
        GradientReport with one entry per parameter group
    """
    arch = config or tiny_architecture()
    weights = weights or LossWeights(lambda_ir=1.0, lambda_rgb=1.0, lambda_kl=1.0, lambda_l1=1.0)
    models = init_params(seed, arch).to(torch.float64)
    models.train()

    rng = np.random.default_rng(seed)
    # inputs kept above the fused range so the L1 terms never cross their kink
    visual = torch.from_numpy(rng.uniform(0.75, 1.0, size=(1, 3, size, size)))
    thermal = torch.from_numpy(rng.uniform(0.75, 1.0, size=(1, 1, size, size)))

    def loss_fn() -> torch.Tensor:
        fused = models.generator(visual, thermal).fused
        total, _, _, _ = generator_objective(models, visual, thermal, fused, weights, bins, 1e-8)
        return total

    logger.info("=" * 80)
    logger.info(f"GRADIENT CHECK: seed {seed}, {size}x{size}, step {step}")
    logger.info("=" * 80)

    grads = analytic_gradients(models, loss_fn)
    with torch.no_grad():
        base_loss = abs(loss_fn().item())
    # float64 round-off of the loss, seen through the difference quotient
    resolution = 3.0 * 64.0 * np.finfo(np.float64).eps * max(1.0, base_loss) / step
    zero_scale = max(GRADCHECK_ZERO_SCALE, resolution / GRADCHECK_THRESHOLD)

    errors: Dict[str, float] = {}
    with torch.no_grad():
        for prefix, module in models.named_modules().items():
            for name, param in module.named_parameters():
                group = f"{prefix}.{name}"
                flat = param.view(-1)
                coords = _pick_coords(grads[group].view(-1).numpy(), max_coords, rng)
                analytic = grads[group].view(-1)[torch.from_numpy(coords)].numpy()
                numeric = np.empty(len(coords))
                for i, idx in enumerate(coords):
                    original = flat[idx].item()

                    def loss_at(value: float) -> float:
                        flat[idx] = value
                        return loss_fn().item()

                    numeric[i] = richardson_derivative(loss_at, original, step)
                    flat[idx] = original
                diff = float(np.max(np.abs(analytic - numeric)))
                scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
                errors[group] = diff / scale if scale >= zero_scale else diff

    report = GradientReport(errors)
    logger.info(f"Checked {len(errors)} parameter groups, max relative error {report.max_error:.2e}")
    return report


# ===== Ablation =====

@dataclass
class AblationResult:
    variant: str
    checkpoint: Checkpoint
    history: TrainingHistory
    base_report: MetricReport
    variant_report: MetricReport
    comparison: ComparisonTable
    parameter_counts: Dict[str, int]


def compare_parameter_counts(configs: Dict[str, TrainingConfig]) -> Dict[str, int]:
    """Trainable generator parameters of each labelled config."""
    return {label: count_parameters(init_params(c.seed, c.effective_architecture()).generator)
            for label, c in configs.items()}


def _evaluation_pairs(dataset: DatasetSplit) -> List[ImagePair]:
    return list(dataset.val) if dataset.val else list(dataset.train)


def run_ablation(variant: str, base_config: TrainingConfig, dataset: DatasetSplit,
                 output_dir: Optional[str] = None,
                 base: Optional[Tuple[Checkpoint, MetricReport]] = None) -> AblationResult:
    """
    Train an ablation variant with the base seed and data order and compare it to the base run.

    Args:
        variant: l1_weight_1, no_kl or no_attention
        base: Already trained (checkpoint, report) of the base run; trained here when None
    """
    variant_config = base_config.for_variant(variant)
    pairs = _evaluation_pairs(dataset)

    if base is None:
        base_dir = os.path.join(output_dir, 'base') if output_dir else None
        base_ckpt, _ = train(base_config, dataset, base_dir)
        base_report, _ = evaluate_generator(models_from_checkpoint(base_ckpt), pairs,
                                            metadata={'run_id': 'base', 'checkpoint_step': base_ckpt.step})
    else:
        base_ckpt, base_report = base

    variant_dir = os.path.join(output_dir, variant) if output_dir else None
    ckpt, history = train(variant_config, dataset, variant_dir)
    variant_report, _ = evaluate_generator(models_from_checkpoint(ckpt), pairs,
                                           metadata={'run_id': variant, 'checkpoint_step': ckpt.step})

    comparison = build_comparison([base_report, variant_report], normalize=True, labels=['base', variant])
    counts = compare_parameter_counts({'base': base_config, variant: variant_config})
    logger.info(f"Ablation {variant}: generator parameters {counts[variant]:,} vs base {counts['base']:,}")
    return AblationResult(variant=variant, checkpoint=ckpt, history=history, base_report=base_report,
                          variant_report=variant_report, comparison=comparison, parameter_counts=counts)
