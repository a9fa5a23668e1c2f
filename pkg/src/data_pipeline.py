"""
Visual-thermal data pipeline.

Ingests real image pairs, brings them to a common resolution, synthesises
procedural misaligned scenes with known ground truth and batches pairs for
training. Images are HxWxC float32 arrays in [0, 1]; visual is RGB (C=3),
thermal is single channel (C=1).
"""

import math
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
from scipy import ndimage

from src.errors import (
    ConfigurationError,
    GenerationError,
    ImageFormatError,
    IngestionError,
    ShapeError,
    ValidationError,
)
from src.utils import derive_seed, ensure_writable_dir, load_json, logger, save_json

MIN_IMAGE_SIDE = 8
MIN_TARGET_SIDE = 32
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
PAIR_PATTERN = re.compile(r'^(?P<stem>.+)_(?P<kind>rgb|ir)\.(?:png|tif|tiff)$', re.IGNORECASE)
MANIFEST_NAME = 'manifest.json'


# ===== Domain types =====

@dataclass
class RawImage:
    """One image as an HxWxC float32 array in [0, 1] (C is 1 or 3)."""

    pixels: np.ndarray
    source_path: Optional[str] = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim == 2:
            pixels = pixels[..., None]
        if pixels.ndim != 3:
            raise ShapeError(f"Image must be HxWxC, got shape {pixels.shape}")
        h, w, c = pixels.shape
        if h == 0 or w == 0:
            raise ValidationError(f"Zero-sized image{self._where()}")
        if c not in (1, 3):
            raise ShapeError(f"Image must have 1 or 3 channels, got {c}{self._where()}")
        if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
            raise ValidationError(f"Image {h}x{w} is below the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum{self._where()}")
        pixels = np.ascontiguousarray(pixels, dtype=np.float32)
        if not np.all(np.isfinite(pixels)):
            raise ValidationError(f"Image contains non-finite values{self._where()}")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValidationError(f"Image values must lie in [0, 1]{self._where()}")
        self.pixels = pixels

    def _where(self) -> str:
        return f" ({self.source_path})" if self.source_path else ""

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class ImagePair:
    """A visual (3-channel) and thermal (1-channel) image of one scene."""

    visual: RawImage
    thermal: RawImage
    aligned_flag: bool = False
    stem: Optional[str] = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.visual.channels != 3:
            raise ShapeError(f"Visual image must have 3 channels, got {self.visual.channels}")
        if self.thermal.channels != 1:
            raise ShapeError(f"Thermal image must have 1 channel, got {self.thermal.channels}")

    @property
    def same_size(self) -> bool:
        return (self.visual.height, self.visual.width) == (self.thermal.height, self.thermal.width)


@dataclass
class MisalignmentSpec:
    """
    Affine warp plus sensor noise applied to the thermal image.

    translation is (dx, dy) in pixels with dx moving columns and dy rows;
    rotation is in degrees (counter-clockwise) about the image centre.
    """

    translation: Tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0
    scale: float = 1.0
    crop_fraction: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.translation = (float(self.translation[0]), float(self.translation[1]))
        if not self.scale > 0:
            raise ConfigurationError(f"Misalignment scale must be > 0, got {self.scale}")
        if not 0.0 <= self.crop_fraction < 0.5:
            raise ConfigurationError(f"crop_fraction must be in [0, 0.5), got {self.crop_fraction}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    @property
    def is_geometric_identity(self) -> bool:
        return (self.translation == (0.0, 0.0) and self.rotation == 0.0
                and self.scale == 1.0 and self.crop_fraction == 0.0)

    @property
    def is_identity(self) -> bool:
        return self.is_geometric_identity and self.noise_sigma == 0.0

    def matrix(self, h: int, w: int) -> np.ndarray:
        """Forward 2x3 affine: rotation and scale about the centre, then translation."""
        centre = ((w - 1) / 2.0, (h - 1) / 2.0)
        m = cv2.getRotationMatrix2D(centre, self.rotation, self.scale)
        m[0, 2] += self.translation[0]
        m[1, 2] += self.translation[1]
        return m

    def sample(self, rng: np.random.Generator) -> 'MisalignmentSpec':
        """Draw a spec whose magnitudes are bounded by this one."""
        dx, dy = abs(self.translation[0]), abs(self.translation[1])
        scale_span = abs(self.scale - 1.0)
        return MisalignmentSpec(
            translation=(float(rng.uniform(-dx, dx)), float(rng.uniform(-dy, dy))),
            rotation=float(rng.uniform(-abs(self.rotation), abs(self.rotation))),
            scale=float(1.0 + rng.uniform(-scale_span, scale_span)),
            crop_fraction=float(rng.uniform(0.0, self.crop_fraction)),
            noise_sigma=self.noise_sigma,
        )

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['translation'] = list(self.translation)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'MisalignmentSpec':
        return cls(
            translation=tuple(data.get('translation', (0.0, 0.0))),
            rotation=data.get('rotation', 0.0),
            scale=data.get('scale', 1.0),
            crop_fraction=data.get('crop_fraction', 0.0),
            noise_sigma=data.get('noise_sigma', 0.0),
        )

    @classmethod
    def parse(cls, text: str) -> 'MisalignmentSpec':
        """
        Parse 'dx,dy,rotation,scale,crop,noise' (trailing fields optional).

        Examples:
            '5,0' -> translation (5, 0)
            '3,-2,10,1.05,0.1,0.02' -> all six fields
        """
        try:
            values = [float(v) for v in text.split(',') if v.strip()]
        except ValueError:
            raise ConfigurationError(f"Misalignment must be comma-separated numbers, got {text!r}")
        if not 1 <= len(values) <= 6:
            raise ConfigurationError(f"Misalignment takes 1 to 6 values, got {len(values)}")
        defaults = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        values = values + defaults[len(values):]
        return cls(translation=(values[0], values[1]), rotation=values[2], scale=values[3],
                   crop_fraction=values[4], noise_sigma=values[5])


@dataclass
class SceneTruth:
    """Exact hot-blob geometry of a synthetic scene."""

    blob_centers: List[Tuple[float, float]]
    blob_radii: List[float]
    warp_applied: MisalignmentSpec = field(default_factory=MisalignmentSpec)

    def to_dict(self) -> Dict:
        return {
            'blob_centers': [list(c) for c in self.blob_centers],
            'blob_radii': list(self.blob_radii),
            'warp_applied': self.warp_applied.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'SceneTruth':
        return cls(
            blob_centers=[tuple(c) for c in data['blob_centers']],
            blob_radii=list(data['blob_radii']),
            warp_applied=MisalignmentSpec.from_dict(data.get('warp_applied', {})),
        )

    def blob_mask(self, h: int, w: int, warped: bool = False) -> np.ndarray:
        """
        Rasterise the blobs into a boolean HxW mask.

        Args:
            h, w: Mask size (the scene's generation size)
            warped: Push centres and radii through the applied warp, i.e. the
                mask of the thermal image as stored rather than as rendered

        Returns:
            Boolean array, True inside any blob radius
        """
        rows, cols = np.mgrid[0:h, 0:w]
        mask = np.zeros((h, w), dtype=bool)
        spec = self.warp_applied
        for (row, col), radius in zip(self.blob_centers, self.blob_radii):
            if warped and not spec.is_geometric_identity:
                m = spec.matrix(h, w)
                col, row = m @ np.array([col, row, 1.0])
                radius = radius * spec.scale
                if spec.crop_fraction > 0:
                    zoom_y, zoom_x, off_y, off_x = _crop_geometry(h, w, spec.crop_fraction)
                    row = (row - off_y) * zoom_y
                    col = (col - off_x) * zoom_x
                    radius = radius * max(zoom_x, zoom_y)
            mask |= (rows - row) ** 2 + (cols - col) ** 2 <= radius ** 2
        return mask


@dataclass
class SceneConfig:
    """Procedural generation settings; sizes are fractions of min(h, w)."""

    blob_radius_range: Tuple[float, float] = (0.05, 0.1)
    blob_amplitude_range: Tuple[float, float] = (0.8, 0.95)
    thermal_background_range: Tuple[float, float] = (0.05, 0.35)
    background_smoothness: float = 0.08
    terrain_octaves: int = 4
    n_shapes: int = 6
    max_placement_attempts: int = 1000

    def __post_init__(self):
        lo, hi = self.blob_amplitude_range
        if lo < 0.8 or hi > 1.0 or lo > hi:
            raise ConfigurationError(f"blob_amplitude_range must lie in [0.8, 1], got {self.blob_amplitude_range}")
        lo, hi = self.thermal_background_range
        if lo < 0.0 or hi >= 0.5 or lo > hi:
            raise ConfigurationError(f"thermal_background_range must lie in [0, 0.5), got {self.thermal_background_range}")
        lo, hi = self.blob_radius_range
        if lo <= 0 or lo > hi:
            raise ConfigurationError(f"blob_radius_range must be positive and ordered, got {self.blob_radius_range}")


@dataclass
class DatasetSplit:
    """Disjoint train / validation partition of a list of items."""

    train: List
    val: List
    seed: int

    @property
    def size(self) -> int:
        return len(self.train) + len(self.val)


# ===== Loading & preprocessing =====

def luminance(pixels: np.ndarray) -> np.ndarray:
    """
    Single-channel luminance (0.299R + 0.587G + 0.114B) of an HxWxC array.

    1-channel images and grey 3-channel images (all channels equal) pass
    through unchanged, so a replicated thermal image maps back bit-exactly.
    """
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        return arr
    if arr.shape[-1] == 1:
        return arr[..., 0]
    if arr.shape[-1] != 3:
        raise ShapeError(f"Luminance needs 1 or 3 channels, got {arr.shape[-1]}")
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    if np.array_equal(r, g) and np.array_equal(g, b):
        return r.copy()
    return LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b


def read_image(path: str) -> np.ndarray:
    """
    Decode an image file to HxWxC float32 in [0, 1], channels in RGB order.

    Integer containers are divided by their maximum (255 or 65535).
    """
    path = str(path)
    if not os.path.exists(path):
        raise FileNotFoundError(f"File not found: {path}")
    if os.path.getsize(path) == 0:
        raise ValidationError(f"Zero-sized image file: {path}")

    data = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if data is None:
        raise ImageFormatError(f"Cannot decode image: {path}")
    if data.size == 0:
        raise ValidationError(f"Zero-sized image: {path}")

    if data.dtype == np.uint8:
        arr = data.astype(np.float32) / 255.0
    elif data.dtype == np.uint16:
        arr = data.astype(np.float32) / 65535.0
    elif data.dtype in (np.float32, np.float64):
        arr = data.astype(np.float32)
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ImageFormatError(f"Floating-point image must hold values in [0, 1]: {path}")
    else:
        raise ImageFormatError(f"Unsupported pixel type {data.dtype}: {path}")

    if arr.ndim == 2:
        arr = arr[..., None]
    elif arr.shape[2] in (3, 4):
        # OpenCV decodes BGR(A)
        arr = arr[..., 2::-1]
    else:
        raise ImageFormatError(f"Unsupported channel count {arr.shape[2]}: {path}")
    return np.ascontiguousarray(arr)


def load_image_pair(visual_path: str, thermal_path: str) -> ImagePair:
    """
    Load a visual/thermal pair at their original resolutions.

    Args:
        visual_path: RGB image (grey images are replicated to 3 channels)
        thermal_path: Thermal image (3-channel grey is reduced by luminance)

    Returns:
        ImagePair with values scaled to [0, 1]; sizes may differ
    """
    visual = read_image(visual_path)
    thermal = read_image(thermal_path)

    if visual.shape[2] == 1:
        visual = np.repeat(visual, 3, axis=2)
    if thermal.shape[2] == 3:
        thermal = luminance(thermal)[..., None]

    pair = ImagePair(
        visual=RawImage(visual, source_path=str(visual_path)),
        thermal=RawImage(thermal, source_path=str(thermal_path)),
        aligned_flag=False,
    )
    logger.info(f"Loaded pair: visual {visual.shape[1]}x{visual.shape[0]}, "
                f"thermal {thermal.shape[1]}x{thermal.shape[0]}")
    return pair


def check_target_size(target_h: int, target_w: int, factor: int):
    """Raise ConfigurationError unless both sides are >= 32 and divisible by factor."""
    for name, side in (('height', target_h), ('width', target_w)):
        if side < MIN_TARGET_SIDE:
            raise ConfigurationError(f"Target {name} {side} is below the minimum of {MIN_TARGET_SIDE}")
        if side % factor != 0:
            raise ConfigurationError(
                f"Target {name} {side} is not divisible by the network downsampling factor {factor}"
            )


def _resize(pixels: np.ndarray, h: int, w: int) -> np.ndarray:
    if pixels.shape[:2] == (h, w):
        return pixels.copy()
    resized = cv2.resize(pixels, (w, h), interpolation=cv2.INTER_LINEAR)
    if resized.ndim == 2:
        resized = resized[..., None]
    return np.clip(resized, 0.0, 1.0)


def preprocess_pair(pair: ImagePair, target_h: int, target_w: int, factor: int = 16) -> ImagePair:
    """
    Resize both images of a pair to target_h x target_w (bilinear).

    Args:
        pair: Pair at any resolutions
        target_h, target_w: Common output size
        factor: Network downsampling factor both sides must divide by

    Returns:
        New ImagePair; images already at the target size are copied unchanged
    """
    check_target_size(target_h, target_w, factor)
    return ImagePair(
        visual=RawImage(_resize(pair.visual.pixels, target_h, target_w), pair.visual.source_path),
        thermal=RawImage(_resize(pair.thermal.pixels, target_h, target_w), pair.thermal.source_path),
        aligned_flag=pair.aligned_flag,
        stem=pair.stem,
        metadata=dict(pair.metadata),
    )


def discover_pairs(directory: str) -> List[Tuple[str, Path, Path]]:
    """
    Match `<stem>_rgb.*` and `<stem>_ir.*` files in a dataset directory.

    Returns:
        Sorted list of (stem, visual_path, thermal_path)

    Raises:
        IngestionError: listing every stem that has only one modality
    """
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"File not found: {root}")

    found: Dict[str, Dict[str, Path]] = {}
    for path in sorted(root.iterdir()):
        match = PAIR_PATTERN.match(path.name)
        if match:
            found.setdefault(match.group('stem'), {})[match.group('kind').lower()] = path

    unmatched = sorted(stem for stem, kinds in found.items() if len(kinds) != 2)
    if unmatched:
        raise IngestionError(f"Unmatched image stems in {root}: {', '.join(unmatched)}")

    pairs = [(stem, kinds['rgb'], kinds['ir']) for stem, kinds in sorted(found.items())]
    logger.info(f"Discovered {len(pairs)} image pairs in {root}")
    return pairs


def load_dataset(directory: str, target_h: int, target_w: int, factor: int = 16) -> List[ImagePair]:
    """Discover, load and preprocess every pair in a directory."""
    check_target_size(target_h, target_w, factor)
    pairs = []
    for stem, visual_path, thermal_path in discover_pairs(directory):
        pair = load_image_pair(str(visual_path), str(thermal_path))
        pair.stem = stem
        pairs.append(preprocess_pair(pair, target_h, target_w, factor))
    return pairs


# ===== Synthetic scenes =====

def _smooth_noise(rng: np.random.Generator, h: int, w: int, sigma: float) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.random((h, w)), sigma=max(sigma, 0.5), mode='reflect')
    lo, hi = noise.min(), noise.max()
    if hi - lo < 1e-12:
        return np.full((h, w), 0.5)
    return (noise - lo) / (hi - lo)


def _place_blobs(rng: np.random.Generator, h: int, w: int, n_blobs: int,
                 params: SceneConfig) -> Tuple[List[Tuple[float, float]], List[float]]:
    side = min(h, w)
    radii = [float(r) for r in rng.uniform(*params.blob_radius_range, size=n_blobs) * side]
    if sum(math.pi * r * r for r in radii) > 0.6 * h * w:
        raise GenerationError(f"{n_blobs} blobs cannot fit in a {h}x{w} image")

    centers: List[Tuple[float, float]] = []
    for radius in radii:
        margin = min(radius, (min(h, w) - 1) / 2.0)
        for _ in range(params.max_placement_attempts):
            row = float(rng.uniform(margin, h - 1 - margin))
            col = float(rng.uniform(margin, w - 1 - margin))
            clear = all(
                math.hypot(row - r0, col - c0) >= radius + r1
                for (r0, c0), r1 in zip(centers, radii)
            )
            if clear:
                centers.append((row, col))
                break
        else:
            raise GenerationError(
                f"Could not place {n_blobs} non-overlapping blobs in a {h}x{w} image"
            )
    return centers, radii


def _render_terrain(rng: np.random.Generator, h: int, w: int, params: SceneConfig) -> np.ndarray:
    side = min(h, w)
    terrain = np.zeros((h, w))
    total = 0.0
    for octave in range(params.terrain_octaves):
        amplitude = 0.5 ** octave
        terrain += amplitude * _smooth_noise(rng, h, w, side * 0.15 / (2 ** octave))
        total += amplitude
    terrain /= total

    grass = np.array([0.25, 0.45, 0.20])
    soil = np.array([0.55, 0.42, 0.28])
    visual = (1.0 - terrain[..., None]) * grass + terrain[..., None] * soil
    visual += 0.04 * (rng.random((h, w, 1)) - 0.5)
    visual = np.ascontiguousarray(visual, dtype=np.float32)

    # rocks and trails
    for _ in range(params.n_shapes):
        colour = tuple(float(v) for v in rng.uniform(0.3, 0.75, size=3))
        if rng.random() < 0.5:
            centre = (int(rng.integers(0, w)), int(rng.integers(0, h)))
            cv2.circle(visual, centre, int(rng.integers(1, max(2, side // 10))), colour, -1)
        else:
            p1 = (int(rng.integers(0, w)), int(rng.integers(0, h)))
            p2 = (int(rng.integers(0, w)), int(rng.integers(0, h)))
            cv2.line(visual, p1, p2, colour, int(rng.integers(1, max(2, side // 32) + 1)))
    return np.clip(visual, 0.0, 1.0)


def generate_synthetic_scene(seed: int, h: int, w: int, n_blobs: int,
                             params: Optional[SceneConfig] = None) -> Tuple[ImagePair, SceneTruth]:
    """
    Generate an aligned synthetic visual/thermal scene.

    The thermal image holds `n_blobs` Gaussian hot spots (peak >= 0.8) on a
    smooth background below 0.5. The visual image is terrain texture drawn
    from an independent random stream, so the hot spots are not visible in it.

    Args:
        seed: Scene seed; the output is a pure function of the arguments
        h, w: Image size (>= 32)
        n_blobs: Number of hot spots (>= 0)
        params: Generation settings

    Returns:
        (ImagePair with aligned_flag True, SceneTruth)
    """
    params = params or SceneConfig()
    if n_blobs < 0:
        raise ValidationError(f"n_blobs must be >= 0, got {n_blobs}")
    if h < MIN_TARGET_SIDE or w < MIN_TARGET_SIDE:
        raise ValidationError(f"Synthetic scenes need h, w >= {MIN_TARGET_SIDE}, got {h}x{w}")

    thermal_rng, blob_rng, visual_rng = [np.random.default_rng(s)
                                         for s in np.random.SeedSequence(seed).spawn(3)]

    # 1. Thermal background
    lo, hi = params.thermal_background_range
    background = _smooth_noise(thermal_rng, h, w, min(h, w) * params.background_smoothness)
    thermal = lo + (hi - lo) * background

    # 2. Hot blobs
    centers, radii = _place_blobs(blob_rng, h, w, n_blobs, params)
    rows, cols = np.mgrid[0:h, 0:w]
    amplitudes = blob_rng.uniform(*params.blob_amplitude_range, size=n_blobs)
    for (row, col), radius, amplitude in zip(centers, radii, amplitudes):
        sigma = radius / 2.0
        blob = np.exp(-((rows - row) ** 2 + (cols - col) ** 2) / (2.0 * sigma ** 2))
        # brightest sampled pixel of every blob equals its amplitude
        peak = blob.max()
        if peak > 0.0:
            thermal = np.maximum(thermal, amplitude * blob / peak)

    # 3. Visual terrain
    visual = _render_terrain(visual_rng, h, w, params)

    pair = ImagePair(
        visual=RawImage(visual),
        thermal=RawImage(np.clip(thermal, 0.0, 1.0)[..., None]),
        aligned_flag=True,
    )
    return pair, SceneTruth(blob_centers=centers, blob_radii=radii)


def _crop_geometry(h: int, w: int, crop_fraction: float) -> Tuple[float, float, int, int]:
    off_y = int(round(h * crop_fraction / 2.0))
    off_x = int(round(w * crop_fraction / 2.0))
    zoom_y = h / float(h - 2 * off_y)
    zoom_x = w / float(w - 2 * off_x)
    return zoom_y, zoom_x, off_y, off_x


def _out_of_frame_fraction(spec: MisalignmentSpec, h: int, w: int) -> float:
    rows, cols = np.mgrid[0:h:2, 0:w:2]
    points = np.stack([cols.ravel(), rows.ravel(), np.ones(cols.size)]).astype(np.float64)
    dst_x, dst_y = spec.matrix(h, w) @ points
    lo_y, lo_x, hi_y, hi_x = 0.0, 0.0, h - 1.0, w - 1.0
    if spec.crop_fraction > 0:
        _, _, off_y, off_x = _crop_geometry(h, w, spec.crop_fraction)
        lo_y, lo_x, hi_y, hi_x = off_y, off_x, h - 1.0 - off_y, w - 1.0 - off_x
    inside = (dst_x >= lo_x) & (dst_x <= hi_x) & (dst_y >= lo_y) & (dst_y <= hi_y)
    return float(1.0 - inside.mean())


def inject_misalignment(pair: ImagePair, spec: MisalignmentSpec, seed: int) -> ImagePair:
    """
    Warp and corrupt the thermal image of a pair; the visual image is untouched.

    Order: rotation about the centre, scale, translation (dx -> columns),
    optional central crop resized back to full size, then additive Gaussian
    noise clipped to [0, 1]. Out-of-frame areas replicate the edge.
    """
    if not pair.same_size:
        raise ShapeError("inject_misalignment needs a pair whose images share one size")

    h, w = pair.thermal.height, pair.thermal.width
    thermal = pair.thermal.pixels[..., 0].copy()
    metadata = dict(pair.metadata)

    if not spec.is_geometric_identity:
        thermal = cv2.warpAffine(thermal, spec.matrix(h, w), (w, h),
                                 flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)
        if spec.crop_fraction > 0:
            _, _, off_y, off_x = _crop_geometry(h, w, spec.crop_fraction)
            thermal = cv2.resize(thermal[off_y:h - off_y, off_x:w - off_x], (w, h),
                                 interpolation=cv2.INTER_LINEAR)

        lost = _out_of_frame_fraction(spec, h, w)
        metadata['out_of_frame_fraction'] = lost
        if lost > 0.5:
            logger.warning(f"Warp moves {lost:.0%} of the thermal content out of frame")
            metadata['misalignment_warning'] = f"{lost:.0%} of content out of frame"

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        thermal = thermal + rng.normal(0.0, spec.noise_sigma, size=thermal.shape)

    metadata['misalignment'] = spec.to_dict()
    return ImagePair(
        visual=pair.visual,
        thermal=RawImage(np.clip(thermal, 0.0, 1.0)[..., None], pair.thermal.source_path),
        aligned_flag=False,
        stem=pair.stem,
        metadata=metadata,
    )


def _to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_synthetic_corpus(out_dir: str, count: int, h: int, w: int, n_blobs: int,
                           misalignment: Optional[MisalignmentSpec] = None, seed: int = 0,
                           randomize: bool = False,
                           params: Optional[SceneConfig] = None) -> Dict:
    """
    Write `count` synthetic PNG pairs plus manifest.json to out_dir.

    Args:
        out_dir: Output directory (created if missing)
        count: Number of pairs
        h, w: Scene size
        n_blobs: Hot spots per scene
        misalignment: Warp applied to every thermal image
        seed: Corpus seed; identical arguments give a byte-identical corpus
        randomize: Treat `misalignment` as per-item magnitude bounds
        params: Generation settings

    Returns:
        The manifest dictionary (also written to disk)
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    misalignment = misalignment or MisalignmentSpec()
    directory = ensure_writable_dir(out_dir)

    logger.info("=" * 80)
    logger.info(f"GENERATING {count} SYNTHETIC PAIRS ({h}x{w}, {n_blobs} blobs)")
    logger.info("=" * 80)

    items = []
    for index in range(count):
        item_seed = derive_seed(seed, index)
        pair, truth = generate_synthetic_scene(item_seed, h, w, n_blobs, params)

        spec = misalignment
        if randomize:
            spec = misalignment.sample(np.random.default_rng(derive_seed(item_seed, 1)))
        warped = inject_misalignment(pair, spec, derive_seed(item_seed, 2))
        truth.warp_applied = spec

        stem = f"scene_{index:04d}"
        cv2.imwrite(str(directory / f"{stem}_rgb.png"), cv2.cvtColor(_to_uint8(warped.visual.pixels), cv2.COLOR_RGB2BGR))
        cv2.imwrite(str(directory / f"{stem}_ir.png"), _to_uint8(warped.thermal.pixels[..., 0]))

        items.append({
            'stem': stem,
            'seed': item_seed,
            'truth': truth.to_dict(),
            'misalignment': spec.to_dict(),
            'out_of_frame_fraction': warped.metadata.get('out_of_frame_fraction', 0.0),
        })

    manifest = {
        'seed': seed,
        'count': count,
        'size': [h, w],
        'n_blobs': n_blobs,
        'randomized_misalignment': randomize,
        'items': items,
    }
    save_json(manifest, str(directory / MANIFEST_NAME))
    logger.info(f"Wrote {count} pairs to: {directory}")
    return manifest


def load_scene_truths(directory: str) -> Dict[str, Tuple[SceneTruth, Tuple[int, int]]]:
    """Read manifest.json of a synthetic corpus into {stem: (truth, (h, w))}; empty when absent."""
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        return {}
    manifest = load_json(str(path))
    size = tuple(manifest['size'])
    return {item['stem']: (SceneTruth.from_dict(item['truth']), size) for item in manifest['items']}


# ===== Splitting & batching =====

def split_dataset(items: Sequence, ratio: float, seed: int) -> DatasetSplit:
    """
    Deterministically shuffle and split items; the first ceil(ratio * N) train.

    Examples:
        10 items, ratio 0.8 -> 8 train, 2 val
        3 items, ratio 0.5 -> 2 train, 1 val
    """
    items = list(items)
    if not items:
        raise ValidationError("Cannot split an empty dataset")
    if len(items) < 2:
        raise ValidationError(f"Need at least 2 items to split, got {len(items)}")
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"Split ratio must be in (0, 1), got {ratio}")

    order = np.random.default_rng(seed).permutation(len(items))
    # round first so 0.7 * 10 is 7, not 8
    n_train = math.ceil(round(ratio * len(items), 9))
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train:]]
    return DatasetSplit(train=train, val=val, seed=seed)


def batch_iterator(items: Sequence, batch_size: int, shuffle_seed: int, epoch: int = 0) -> Iterator[List]:
    """
    Yield one epoch of batches; the last batch may be short.

    The order is a permutation of all items determined by (shuffle_seed, epoch).
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    items = list(items)
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]


def count_batches(n_items: int, batch_size: int) -> int:
    return (n_items + batch_size - 1) // batch_size


def collate(batch: Sequence[ImagePair], dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack a batch of same-size pairs into (visual Bx3xHxW, thermal Bx1xHxW) tensors."""
    if not batch:
        raise ValidationError("Cannot collate an empty batch")
    sizes = {(p.visual.height, p.visual.width, p.thermal.height, p.thermal.width) for p in batch}
    if len(sizes) != 1:
        raise ShapeError(f"Batch mixes image sizes: {sorted(sizes)}")
    visual = np.stack([p.visual.pixels for p in batch]).transpose(0, 3, 1, 2)
    thermal = np.stack([p.thermal.pixels for p in batch]).transpose(0, 3, 1, 2)
    return (torch.from_numpy(np.ascontiguousarray(visual)).to(dtype),
            torch.from_numpy(np.ascontiguousarray(thermal)).to(dtype))
