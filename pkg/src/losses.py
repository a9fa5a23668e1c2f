"""
Adversarial, KL-divergence and L1 losses plus their weighted total.

Scalar helpers accept python floats (returning floats) or torch tensors
(returning tensors that stay in the autograd graph). Logs are natural logs.
"""

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Union

import numpy as np
import torch

from src.data_pipeline import RawImage, luminance
from src.errors import ConfigurationError, NumericError, ShapeError, ValidationError

PROB_CLAMP = 1e-7
DEFAULT_BINS = 64
DEFAULT_EPSILON = 1e-8
LUMA = (0.299, 0.587, 0.114)

Scalar = Union[float, torch.Tensor]


@dataclass
class LossWeights:
    lambda_ir: float = 1.0
    lambda_rgb: float = 1.0
    lambda_kl: float = 10.0
    lambda_l1: float = 100.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ValidationError(f"weights.{f.name} must be a number, got {value!r}")
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"weights.{f.name} must be finite and >= 0, got {value}")

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'LossWeights':
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigurationError(f"Unknown weights keys: {', '.join(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass
class LossBreakdown:
    """Per-step losses; adv_* come from the discriminator phase, the rest from the generator phase."""

    adv_ir: float
    adv_rgb: float
    gen: float
    kl: float
    l1: float
    total: float

    @staticmethod
    def compose_total(gen: float, kl: float, l1: float, weights: LossWeights) -> float:
        return gen + weights.lambda_kl * kl + weights.lambda_l1 * l1

    def as_row(self, step: int) -> Dict[str, float]:
        row = {'step': step}
        row.update(asdict(self))
        return row


@dataclass
class PixelDistribution:
    probs: np.ndarray
    epsilon: float

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 1 or self.probs.size < 2:
            raise ValidationError(f"Distribution needs at least 2 bins, got shape {self.probs.shape}")
        if np.any(self.probs <= 0):
            raise ValidationError("Distribution entries must be strictly positive")
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValidationError(f"Distribution sums to {self.probs.sum()}, expected 1")

    @property
    def bins(self) -> int:
        return self.probs.size


def _check_not_nan(value: Scalar, name: str):
    if isinstance(value, torch.Tensor):
        if torch.isnan(value).any():
            raise NumericError(f"NaN {name}")
    elif math.isnan(value):
        raise NumericError(f"NaN {name}")


def _neg_log(p: Scalar) -> Scalar:
    if isinstance(p, torch.Tensor):
        return -torch.log(torch.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP))
    return -math.log(min(max(float(p), PROB_CLAMP), 1.0 - PROB_CLAMP))


def _reduce(value: Scalar) -> Scalar:
    if isinstance(value, torch.Tensor) and value.dim() > 0:
        return value.mean()
    return value


def adversarial_loss_discriminator(d_real: Scalar, d_fused: Scalar) -> Scalar:
    """
    Discriminator loss -ln D(real) - ln(1 - D(fused)).

    Batched tensor inputs are averaged over the batch.

    Examples:
        (0.5, 0.5) -> 2 ln 2 = 1.386294...
        (0.9, 0.1) -> 0.210721...
    """
    _check_not_nan(d_real, 'discriminator output on the real pair')
    _check_not_nan(d_fused, 'discriminator output on the fused pair')
    return _reduce(_neg_log(d_real) + _neg_log(1.0 - d_fused))


def adversarial_loss_generator(d_fused_ir: Scalar, d_fused_rgb: Scalar, weights: LossWeights) -> Scalar:
    """
    Non-saturating generator loss lambda_ir * -ln D_ir(fused) + lambda_rgb * -ln D_rgb(fused).

    Examples:
        (0.5, 0.5, 1, 1) -> 1.386294...
        (0.5, 0.5, 2, 0) -> 1.386294...
    """
    weights.validate()
    _check_not_nan(d_fused_ir, 'IR discriminator output')
    _check_not_nan(d_fused_rgb, 'RGB discriminator output')
    return _reduce(weights.lambda_ir * _neg_log(d_fused_ir) + weights.lambda_rgb * _neg_log(d_fused_rgb))


def _pixels(image) -> np.ndarray:
    return image.pixels if hasattr(image, 'pixels') else np.asarray(image)


def image_to_distribution(image, bins: int = DEFAULT_BINS, epsilon: float = DEFAULT_EPSILON) -> PixelDistribution:
    """
    Epsilon-smoothed luminance histogram over `bins` equal-width bins on [0, 1].

    Args:
        image: RawImage, FusedImage or HxWxC array
        bins: Number of bins (>= 2)
        epsilon: Mass added to every bin before renormalising
    """
    if bins < 2:
        raise ValidationError(f"bins must be >= 2, got {bins}")
    lum = luminance(_pixels(image)).astype(np.float64)
    counts, _ = np.histogram(lum, bins=bins, range=(0.0, 1.0))
    probs = counts / lum.size + epsilon
    return PixelDistribution(probs / probs.sum(), epsilon)


def kl_divergence(p, q) -> float:
    """KL(P||Q) = sum p_i ln(p_i / q_i) for PixelDistributions or probability vectors."""
    p = p.probs if isinstance(p, PixelDistribution) else np.asarray(p, dtype=np.float64)
    q = q.probs if isinstance(q, PixelDistribution) else np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"Distributions have different supports: {p.shape} vs {q.shape}")
    return float(np.sum(p * np.log(p / q)))


def kl_loss(fused, ir: RawImage, rgb: RawImage, bins: int = DEFAULT_BINS,
            epsilon: float = DEFAULT_EPSILON) -> float:
    """KL(P_fused||P_ir) + KL(P_fused||P_rgb) on hard histograms; used for reporting."""
    p_fused = image_to_distribution(fused, bins, epsilon)
    return (kl_divergence(p_fused, image_to_distribution(ir, bins, epsilon))
            + kl_divergence(p_fused, image_to_distribution(rgb, bins, epsilon)))


def luminance_tensor(x: torch.Tensor) -> torch.Tensor:
    """B x C x H x W -> B x H x W luminance; single-channel input is returned as is."""
    if x.shape[1] == 1:
        return x[:, 0]
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    return LUMA[0] * r + LUMA[1] * g + LUMA[2] * b


def soft_histogram(values: torch.Tensor, bins: int = DEFAULT_BINS, epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """
    Differentiable histogram with a Gaussian kernel one bin wide.

    Each pixel spreads unit mass over the bin centres (k + 0.5) / bins.

    Args:
        values: B x ... intensities in [0, 1]

    Returns:
        B x bins distributions, epsilon-smoothed, rows summing to 1
    """
    flat = values.reshape(values.shape[0], -1, 1)
    centres = (torch.arange(bins, dtype=values.dtype, device=values.device) + 0.5) / bins
    sigma = 1.0 / bins
    kernel = torch.exp(-0.5 * ((flat - centres) / sigma) ** 2)
    kernel = kernel / kernel.sum(dim=2, keepdim=True)
    probs = kernel.mean(dim=1) + epsilon
    return probs / probs.sum(dim=1, keepdim=True)


def soft_kl_loss(fused: torch.Tensor, ir: torch.Tensor, rgb: torch.Tensor, bins: int = DEFAULT_BINS,
                 epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """Soft-binned KL(P_fused||P_ir) + KL(P_fused||P_rgb), averaged over the batch."""
    p_fused = soft_histogram(luminance_tensor(fused), bins, epsilon)
    total = fused.new_zeros(fused.shape[0])
    for other in (ir, rgb):
        q = soft_histogram(luminance_tensor(other), bins, epsilon)
        total = total + torch.sum(p_fused * torch.log(p_fused / q), dim=1)
    return total.mean()


def l1_loss(fused, ir, rgb) -> Scalar:
    """
    mean|fused - rep3(ir)| + mean|fused - rgb|.

    Tensors are B x C x H x W (channel 1); images or arrays are H x W x C.

    Examples:
        fused = 0.5, ir = 0.25, rgb = 0.75 everywhere -> 0.5
    """
    if isinstance(fused, torch.Tensor):
        if fused.shape[2:] != ir.shape[2:] or fused.shape != rgb.shape or fused.shape[0] != ir.shape[0]:
            raise ShapeError(
                f"L1 inputs differ in size: fused {tuple(fused.shape)}, ir {tuple(ir.shape)}, rgb {tuple(rgb.shape)}"
            )
        ir3 = ir.expand(-1, fused.shape[1], -1, -1)
        return torch.mean(torch.abs(fused - ir3)) + torch.mean(torch.abs(fused - rgb))

    f = _pixels(fused).astype(np.float64)
    t = _pixels(ir).astype(np.float64)
    v = _pixels(rgb).astype(np.float64)
    if f.shape[:2] != t.shape[:2] or f.shape != v.shape:
        raise ShapeError(f"L1 inputs differ in size: fused {f.shape}, ir {t.shape}, rgb {v.shape}")
    t3 = np.broadcast_to(t, f.shape)
    return float(np.mean(np.abs(f - t3)) + np.mean(np.abs(f - v)))


def _check_finite(value: Scalar, name: str):
    finite = bool(torch.isfinite(value).all()) if isinstance(value, torch.Tensor) else math.isfinite(value)
    if not finite:
        raise NumericError(f"Non-finite {name} loss component")


def total_loss(gen: Scalar, kl: Scalar, l1: Scalar, weights: LossWeights) -> Scalar:
    """
    gen + lambda_kl * kl + lambda_l1 * l1.

    Raises:
        NumericError: naming the first non-finite component
    """
    _check_finite(gen, 'gen')
    _check_finite(kl, 'kl')
    _check_finite(l1, 'l1')
    return gen + weights.lambda_kl * kl + weights.lambda_l1 * l1
