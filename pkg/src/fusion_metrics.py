"""
MISFIT-V Fusion - Fusion quality metrics

MSE, PSNR, UQI, MS-SSIM and NMI between a fused image and each source
image, computed on single-channel luminance in double precision.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from src.data_pipeline import ImagePair, luminance
from src.errors import ShapeError, ValidationError
from src.utils import load_json, logger, save_json

METRICS = ('MSE', 'UQI', 'MSSSIM', 'NMI', 'PSNR')
MODALITIES = ('thermal', 'visual')
HIGHER_IS_BETTER = {'MSE': False, 'UQI': True, 'MSSSIM': True, 'NMI': True, 'PSNR': True}

PSNR_CAP_DB = 120.0
MSE_FLOOR = 1e-12
UQI_VANISH = 1e-12
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _prepare(image) -> np.ndarray:
    pixels = image.pixels if hasattr(image, 'pixels') else np.asarray(image)
    return np.asarray(luminance(pixels), dtype=np.float64)


def _prepare_pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    x, y = _prepare(a), _prepare(b)
    if x.shape != y.shape:
        raise ShapeError(f"Metric inputs differ in size: {x.shape} vs {y.shape}")
    return x, y


def mse(a, b) -> float:
    x, y = _prepare_pair(a, b)
    return float(np.mean((x - y) ** 2))


def psnr(a, b, data_range: float = 1.0) -> float:
    """
    10 log10(range^2 / MSE) in dB; MSE below 1e-12 returns the 120 dB cap.

    Examples:
        MSE 0.01 -> 20 dB
        a = 0, b = 1 -> 0 dB
    """
    error = mse(a, b)
    if error < MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(data_range ** 2 / error))


def uqi_window_scores(x: np.ndarray, y: np.ndarray, window: int) -> np.ndarray:
    """Quality index of every window x window patch (stride 1)."""
    wa = sliding_window_view(x, (window, window))
    wb = sliding_window_view(y, (window, window))
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    da = wa - mu_a[..., None, None]
    db = wb - mu_b[..., None, None]
    var_a = (da ** 2).mean(axis=(2, 3))
    var_b = (db ** 2).mean(axis=(2, 3))
    cov = (da * db).mean(axis=(2, 3))

    contrast = var_a + var_b
    lum = mu_a ** 2 + mu_b ** 2
    small_c = contrast < UQI_VANISH
    small_l = lum < UQI_VANISH
    with np.errstate(divide='ignore', invalid='ignore'):
        q = 4.0 * cov * mu_a * mu_b / (contrast * lum)
    q = np.where(small_c | small_l, 0.0, q)
    q = np.where(small_c & small_l, 1.0, q)
    return q


def uqi(a, b, window: int = 8) -> float:
    """
    Mean universal quality index over all stride-1 windows.

    Both denominator factors vanishing scores a window 1; exactly one scores 0.
    """
    x, y = _prepare_pair(a, b)
    if window < 1 or window > min(x.shape):
        raise ValidationError(f"UQI window {window} does not fit a {x.shape[0]}x{x.shape[1]} image")
    return float(np.mean(uqi_window_scores(x, y, window)))


def gaussian_window(size: int, sigma: float = MSSSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation with a 1-D kernel along rows then columns."""
    rows = sliding_window_view(x, g.size, axis=0) @ g
    return sliding_window_view(rows, g.size, axis=1) @ g


def _mean_pool(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    return x[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def effective_msssim_scales(h: int, w: int, scales: int, window: int) -> Tuple[int, int]:
    """
    Largest scale count (<= scales) with min(h, w) >= window * 2^(scales-1).

    Returns:
        (scales, window); the window shrinks to min(h, w) when even one scale does not fit
    """
    side = min(h, w)
    n = max(1, min(scales, len(MSSSIM_WEIGHTS)))
    while n > 1 and side < window * 2 ** (n - 1):
        n -= 1
    return n, min(window, side)


def _ssim_terms(x: np.ndarray, y: np.ndarray, g: np.ndarray, c1: float, c2: float) -> Tuple[float, float]:
    mu_a = _filter_valid(x, g)
    mu_b = _filter_valid(y, g)
    var_a = _filter_valid(x * x, g) - mu_a ** 2
    var_b = _filter_valid(y * y, g) - mu_b ** 2
    cov = _filter_valid(x * y, g) - mu_a * mu_b
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    lum = (2.0 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return float(np.mean(lum)), float(np.mean(cs))


def msssim(a, b, scales: int = 5, window: int = 11, data_range: float = 1.0, warn: bool = True) -> float:
    """
    Multi-scale structural similarity with a Gaussian window (sigma 1.5).

    Contrast-structure terms from every scale, luminance from the coarsest,
    2x2 mean-pooling between scales. Scales that do not fit the image are
    dropped and the remaining exponents renormalised.
    """
    x, y = _prepare_pair(a, b)
    n, size = effective_msssim_scales(x.shape[0], x.shape[1], scales, window)
    if warn and (n, size) != (scales, window):
        logger.warning(f"MSSSIM reduced to {n} scales (window {size}) for a {x.shape[0]}x{x.shape[1]} image")

    weights = np.asarray(MSSSIM_WEIGHTS[:n])
    weights = weights / weights.sum()
    g = gaussian_window(size)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2

    value = 1.0
    for level in range(n):
        lum, cs = _ssim_terms(x, y, g, c1, c2)
        if level == n - 1:
            value *= max(lum, 0.0) ** weights[level] * max(cs, 0.0) ** weights[level]
        else:
            value *= max(cs, 0.0) ** weights[level]
            x, y = _mean_pool(x), _mean_pool(y)
    return float(value)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def nmi(a, b, bins: int = 64) -> float:
    """
    Normalized mutual information 2 I(A;B) / (H(A) + H(B)), natural logs.

    Two constant images (zero total entropy) score 1.
    """
    x, y = _prepare_pair(a, b)
    joint, _, _ = np.histogram2d(x.ravel(), y.ravel(), bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    h_a, h_b = _entropy(px), _entropy(py)
    if h_a + h_b == 0.0:
        return 1.0
    nz = pxy > 0
    mutual = float(np.sum(pxy[nz] * np.log(pxy[nz] / np.outer(px, py)[nz])))
    return float(min(max(2.0 * mutual / (h_a + h_b), 0.0), 1.0))


@dataclass
class MetricReport:
    """Five metrics against each source modality plus run metadata."""

    vs_thermal: Dict[str, float]
    vs_visual: Dict[str, float]
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        for name, values in (('thermal', self.vs_thermal), ('visual', self.vs_visual)):
            missing = [m for m in METRICS if m not in values]
            if missing:
                raise ValidationError(f"MetricReport vs {name} is missing {missing}")

    def value(self, metric: str, modality: str) -> float:
        return (self.vs_thermal if modality == 'thermal' else self.vs_visual)[metric]

    def flat(self) -> Dict[str, float]:
        """The 10 values keyed '<metric>_<modality>'."""
        return {f"{m}_{mod}": self.value(m, mod) for m in METRICS for mod in MODALITIES}

    def to_dict(self) -> Dict:
        return {'vs_thermal': dict(self.vs_thermal), 'vs_visual': dict(self.vs_visual),
                'metadata': dict(self.metadata)}

    @classmethod
    def from_dict(cls, data: Dict) -> 'MetricReport':
        return cls(vs_thermal=dict(data['vs_thermal']), vs_visual=dict(data['vs_visual']),
                   metadata=dict(data.get('metadata', {})))


def _metric_set(fused, source, uqi_window: int, scales: int, window: int, bins: int) -> Dict[str, float]:
    return {
        'MSE': mse(fused, source),
        'UQI': uqi(fused, source, uqi_window),
        'MSSSIM': msssim(fused, source, scales, window, warn=False),
        'NMI': nmi(fused, source, bins),
        'PSNR': psnr(fused, source),
    }


def evaluate_fusion(fused, pair: ImagePair, uqi_window: int = 8, msssim_scales: int = 5,
                    msssim_window: int = 11, nmi_bins: int = 64,
                    metadata: Optional[Dict] = None) -> MetricReport:
    """
    Score a fused image against the thermal and the visual image of its pair.

    Args:
        fused: FusedImage or HxWx3 array
        pair: Preprocessed pair at the fused resolution

    Returns:
        MetricReport with 5 metrics x 2 modalities
    """
    h, w = _prepare(fused).shape
    if (h, w) != (pair.visual.height, pair.visual.width) or not pair.same_size:
        raise ShapeError(
            f"Fused image {h}x{w} does not match the pair "
            f"({pair.visual.height}x{pair.visual.width} / {pair.thermal.height}x{pair.thermal.width})"
        )
    window = min(uqi_window, h, w)
    scales, ms_window = effective_msssim_scales(h, w, msssim_scales, msssim_window)

    meta = {'uqi_window': window, 'msssim_scales': scales, 'msssim_window': ms_window,
            'nmi_bins': nmi_bins, 'nmi_convention': '2I/(H_A+H_B)', 'psnr_cap_db': PSNR_CAP_DB}
    meta.update(metadata or {})
    return MetricReport(
        vs_thermal=_metric_set(fused, pair.thermal, window, scales, ms_window, nmi_bins),
        vs_visual=_metric_set(fused, pair.visual, window, scales, ms_window, nmi_bins),
        metadata=meta,
    )


def aggregate_reports(reports: Sequence[MetricReport], metadata: Optional[Dict] = None) -> MetricReport:
    """Mean of every value over reports, summed in list order."""
    if not reports:
        raise ValidationError("Cannot aggregate an empty list of reports")
    means = {}
    for modality in MODALITIES:
        means[modality] = {m: math.fsum(r.value(m, modality) for r in reports) / len(reports) for m in METRICS}
    meta = {k: v for k, v in reports[0].metadata.items() if k != 'stem'}
    meta.update({'n_items': len(reports)})
    meta.update(metadata or {})
    return MetricReport(vs_thermal=means['thermal'], vs_visual=means['visual'], metadata=meta)


@dataclass
class ComparisonTable:
    """Runs as rows, (metric, modality) pairs as columns."""

    frame: pd.DataFrame
    normalized: bool

    @property
    def labels(self) -> List[str]:
        return list(self.frame.index)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.frame.shape

    def column(self, metric: str, modality: str) -> pd.Series:
        return self.frame[(metric, modality)]

    def to_long(self) -> pd.DataFrame:
        """One row per (run, metric, modality) with the better-direction annotation."""
        rows = []
        for label in self.frame.index:
            for metric, modality in self.frame.columns:
                rows.append({
                    'run': label,
                    'metric': metric,
                    'modality': modality,
                    'value': float(self.frame.loc[label, (metric, modality)]),
                    'better': 'higher' if HIGHER_IS_BETTER[metric] else 'lower',
                })
        return pd.DataFrame(rows)

    def to_dict(self) -> Dict:
        return {
            'normalized': self.normalized,
            'better': {m: ('higher' if HIGHER_IS_BETTER[m] else 'lower') for m in METRICS},
            'rows': {label: {f"{m}_{mod}": float(self.frame.loc[label, (m, mod)])
                             for m, mod in self.frame.columns}
                     for label in self.frame.index},
        }


def build_comparison(reports: Sequence[MetricReport], normalize: bool = True,
                     labels: Optional[Sequence[str]] = None) -> ComparisonTable:
    """
    Tabulate reports side by side.

    With normalize, every column is divided by its maximum absolute value
    (an all-zero column becomes all ones: every run ties).
    """
    if not reports:
        raise ValidationError("Cannot build a comparison from zero reports")
    if labels is None:
        labels = [str(r.metadata.get('run_id', f"run_{i}")) for i, r in enumerate(reports)]
    if len(labels) != len(reports):
        raise ValidationError(f"{len(labels)} labels for {len(reports)} reports")

    columns = pd.MultiIndex.from_tuples([(m, mod) for m in METRICS for mod in MODALITIES],
                                        names=['metric', 'modality'])
    data = [[r.value(m, mod) for m, mod in columns] for r in reports]
    frame = pd.DataFrame(data, index=list(labels), columns=columns, dtype=np.float64)

    if normalize:
        scale = frame.abs().max(axis=0)
        zero = scale == 0.0
        frame = frame.div(scale.where(~zero, 1.0), axis=1)
        frame.loc[:, zero.values] = 1.0
    return ComparisonTable(frame=frame, normalized=normalize)


def hotspot_overlap(fused, mask: np.ndarray, top_fraction: float = 0.01) -> float:
    """
    Fraction of the brightest fused-luminance pixels that fall inside mask.

    Args:
        fused: Fused image
        mask: Boolean HxW ground-truth hot region
        top_fraction: Share of pixels taken as the bright set (at least one pixel)
    """
    lum = _prepare(fused)
    if lum.shape != mask.shape:
        raise ShapeError(f"Mask {mask.shape} does not match fused image {lum.shape}")
    if not 0.0 < top_fraction <= 1.0:
        raise ValidationError(f"top_fraction must be in (0, 1], got {top_fraction}")
    flat = lum.ravel()
    k = max(1, int(math.ceil(top_fraction * flat.size)))
    top = np.argpartition(-flat, k - 1)[:k]
    return float(mask.ravel()[top].mean())


def hotspot_hit_rate(fused_images: Sequence, masks: Sequence[np.ndarray], top_fraction: float = 0.01) -> float:
    """Share of scenes whose bright fused pixels intersect the hot region at all."""
    if len(fused_images) != len(masks) or not masks:
        raise ValidationError(f"Need matching non-empty lists, got {len(fused_images)} images, {len(masks)} masks")
    hits = [hotspot_overlap(f, m, top_fraction) > 0.0 for f, m in zip(fused_images, masks)]
    return float(np.mean(hits))


def save_report(report: MetricReport, filepath: str, items: Optional[List[Dict]] = None) -> str:
    payload = {'aggregate': report.to_dict()}
    if items is not None:
        payload['items'] = items
    return save_json(payload, filepath)


def load_report(filepath: str) -> MetricReport:
    data = load_json(filepath)
    return MetricReport.from_dict(data.get('aggregate', data))
