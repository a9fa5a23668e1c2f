"""
Generator and dual discriminators.

Generator: per-modality down-CNN -> query-exchanged cross-attention ->
multiply with the downsampled features -> per-modality up-CNN ->
channel concatenation -> U-Net -> 1x1 head -> sigmoid.
Discriminators: patch classifiers over (original, fused) channel stacks,
one for thermal (1 + 3 channels) and one for visual (3 + 3 channels).
"""

from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from src.cross_attention import AttentionParams, FeatureMap, IdentityExchange, Modality, exchange_queries
from src.data_pipeline import ImagePair, RawImage, collate
from src.errors import ConfigurationError, ModalityError, ShapeError, ValidationError
from src.utils import logger

INIT_STD = 0.02
ACTIVATIONS = ('leaky_relu', 'gelu')


@dataclass
class ArchitectureConfig:
    """Widths and depths of every network; defaults are the full-size model."""

    base_width: int = 32
    down_blocks: int = 2
    d_model: int = 64
    n_heads: int = 4
    positional_encoding: bool = False
    use_attention: bool = True
    unet_depth: int = 4
    unet_width: int = 32
    unet_in_channels: Optional[int] = None
    disc_width: int = 64
    disc_layers: int = 4
    activation: str = 'leaky_relu'

    @property
    def feature_dim(self) -> int:
        return self.base_width * 2 ** self.down_blocks

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.down_blocks

    @property
    def size_factor(self) -> int:
        """Both input sides must be divisible by this."""
        return 2 ** max(self.down_blocks, self.unet_depth)

    def validate(self):
        for f in ('base_width', 'down_blocks', 'd_model', 'n_heads', 'unet_depth', 'unet_width',
                  'disc_width', 'disc_layers'):
            if getattr(self, f) < 1:
                raise ConfigurationError(f"architecture.{f} must be >= 1, got {getattr(self, f)}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"architecture.activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"Layer 'attention': d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        if self.positional_encoding and self.feature_dim % 4 != 0:
            raise ConfigurationError(
                f"Layer 'attention': positional encoding needs feature depth divisible by 4, got {self.feature_dim}"
            )
        expected = 2 * self.base_width
        if self.unet_in_channels is not None and self.unet_in_channels != expected:
            raise ConfigurationError(
                f"Layer 'unet.encoder.0': expects {expected} input channels from the two up-CNNs "
                f"but the config declares {self.unet_in_channels}"
            )

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'ArchitectureConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown architecture keys: {', '.join(unknown)}")
        return cls(**data)


def make_activation(name: str) -> nn.Module:
    if name == 'gelu':
        return nn.GELU()
    return nn.LeakyReLU(0.2)


def conv_block(in_ch: int, out_ch: int, kernel: int, stride: int, padding: int, activation: str) -> nn.Sequential:
    """Conv (no bias) + instance norm + activation."""
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride, padding, bias=False),
        nn.InstanceNorm2d(out_ch, affine=True),
        make_activation(activation),
    )


def up_block(in_ch: int, out_ch: int, kernel: int, activation: str) -> nn.Sequential:
    padding = 1 if kernel == 4 else 0
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, out_ch, kernel, 2, padding, bias=False),
        nn.InstanceNorm2d(out_ch, affine=True),
        make_activation(activation),
    )


class DownCNN(nn.Module):
    """3x3 stem then stride-2 blocks, doubling the width at each block."""

    def __init__(self, in_channels: int, width: int, n_blocks: int, activation: str):
        super().__init__()
        self.stem = conv_block(in_channels, width, 3, 1, 1, activation)
        blocks = []
        channels = width
        for _ in range(n_blocks):
            blocks.append(conv_block(channels, channels * 2, 4, 2, 1, activation))
            channels *= 2
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(self.stem(x))


class UpCNN(nn.Module):
    """Transposed-conv blocks halving the width back to the stem width."""

    def __init__(self, in_channels: int, n_blocks: int, activation: str):
        super().__init__()
        blocks = []
        channels = in_channels
        for _ in range(n_blocks):
            blocks.append(up_block(channels, channels // 2, 4, activation))
            channels //= 2
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)


class UNet(nn.Module):
    """Encoder-decoder with skip concatenation; average-pool down, transposed-conv up."""

    def __init__(self, in_channels: int, width: int, depth: int, activation: str):
        super().__init__()
        widths = [width * 2 ** min(level, 3) for level in range(depth + 1)]
        self.encoder = nn.ModuleList()
        channels = in_channels
        for level in range(depth):
            self.encoder.append(conv_block(channels, widths[level], 3, 1, 1, activation))
            channels = widths[level]
        self.pool = nn.AvgPool2d(2)
        self.bottleneck = conv_block(channels, widths[depth], 3, 1, 1, activation)

        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in reversed(range(depth)):
            self.up.append(up_block(widths[level + 1], widths[level], 2, activation))
            self.decoder.append(conv_block(2 * widths[level], widths[level], 3, 1, 1, activation))
        self.out_channels = widths[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, merge, skip in zip(self.up, self.decoder, reversed(skips)):
            x = merge(torch.cat([up(x), skip], dim=1))
        return x


@dataclass
class GeneratorOutput:
    fused: torch.Tensor
    attention_maps: Optional[Tuple[torch.Tensor, torch.Tensor]]
    features: Dict[str, torch.Tensor]


class FusionGenerator(nn.Module):
    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        config.validate()
        self.config = config
        act = config.activation
        self.down_rgb = DownCNN(3, config.base_width, config.down_blocks, act)
        self.down_ir = DownCNN(1, config.base_width, config.down_blocks, act)
        if config.use_attention:
            self.attention_rgb = AttentionParams(config.feature_dim, config.d_model, config.n_heads,
                                                 positional_encoding=config.positional_encoding)
            self.attention_ir = AttentionParams(config.feature_dim, config.d_model, config.n_heads,
                                                positional_encoding=config.positional_encoding)
        else:
            self.attention_rgb = None
            self.attention_ir = None
            self.identity = IdentityExchange()
        self.up_rgb = UpCNN(config.feature_dim, config.down_blocks, act)
        self.up_ir = UpCNN(config.feature_dim, config.down_blocks, act)
        self.unet = UNet(self.up_rgb.out_channels + self.up_ir.out_channels, config.unet_width,
                         config.unet_depth, act)
        self.head = nn.Conv2d(self.unet.out_channels, 3, kernel_size=1)

    def check_inputs(self, visual: torch.Tensor, thermal: torch.Tensor):
        if visual.dim() != 4 or visual.shape[1] != 3:
            raise ShapeError(f"Visual input must be B x 3 x H x W, got {tuple(visual.shape)}")
        if thermal.dim() != 4 or thermal.shape[1] != 1:
            raise ShapeError(f"Thermal input must be B x 1 x H x W, got {tuple(thermal.shape)}")
        if visual.shape[0] != thermal.shape[0] or visual.shape[2:] != thermal.shape[2:]:
            raise ShapeError(
                f"Pair is not preprocessed: visual {tuple(visual.shape[2:])} vs thermal {tuple(thermal.shape[2:])}"
            )
        factor = self.config.size_factor
        h, w = visual.shape[2:]
        if h % factor or w % factor:
            raise ShapeError(f"Input {h}x{w} is not divisible by the network factor {factor}")

    def forward(self, visual: torch.Tensor, thermal: torch.Tensor) -> GeneratorOutput:
        self.check_inputs(visual, thermal)

        # 1. Downsample each modality
        down_rgb = self.down_rgb(visual)
        down_ir = self.down_ir(thermal)

        # 2. Cross-attention, multiplied with the downsampled features
        if self.config.use_attention:
            attended_rgb, attended_ir, maps = exchange_queries(
                FeatureMap(down_rgb, Modality.RGB), FeatureMap(down_ir, Modality.IR),
                self.attention_rgb, self.attention_ir,
            )
            gated_rgb = attended_rgb.values * down_rgb
            gated_ir = attended_ir.values * down_ir
        else:
            passed_rgb, passed_ir, maps = self.identity(FeatureMap(down_rgb, Modality.RGB), FeatureMap(down_ir, Modality.IR))
            gated_rgb, gated_ir = passed_rgb.values, passed_ir.values

        # 3. Upsample, concatenate, U-Net
        up_rgb = self.up_rgb(gated_rgb)
        up_ir = self.up_ir(gated_ir)
        fused = torch.sigmoid(self.head(self.unet(torch.cat([up_rgb, up_ir], dim=1))))

        features = {
            'down_rgb': down_rgb, 'down_ir': down_ir,
            'gated_rgb': gated_rgb, 'gated_ir': gated_ir,
            'up_rgb': up_rgb, 'up_ir': up_ir,
        }
        return GeneratorOutput(fused=fused, attention_maps=maps, features=features)


@dataclass
class DiscriminatorOutput:
    probabilities: torch.Tensor
    score: torch.Tensor


class PatchDiscriminator(nn.Module):
    """Stride-2 conv stack over (original, fused) emitting a grid of patch probabilities."""

    def __init__(self, original_channels: int, width: int, n_layers: int, activation: str, name: str):
        super().__init__()
        self.original_channels = original_channels
        self.name = name
        layers = [
            nn.Conv2d(original_channels + 3, width, 4, 2, 1),
            make_activation(activation),
        ]
        channels = width
        for _ in range(n_layers - 1):
            out = min(channels * 2, width * 8)
            layers.append(conv_block(channels, out, 4, 2, 1, activation))
            channels = out
        self.body = nn.Sequential(*layers)
        self.final = nn.Conv2d(channels, 1, 3, 1, 1)

    def forward(self, original: torch.Tensor, fused: torch.Tensor) -> DiscriminatorOutput:
        if original.dim() != 4:
            raise ShapeError(f"{self.name} discriminator: original must be B x C x H x W, got {tuple(original.shape)}")
        if original.shape[1] != self.original_channels:
            raise ModalityError(
                f"{self.name} discriminator expects a {self.original_channels}-channel original, "
                f"got {original.shape[1]} channels (wrong modality discriminator)"
            )
        if fused.dim() != 4 or fused.shape[1] != 3:
            raise ShapeError(f"{self.name} discriminator: bad fused image, expected B x 3 x H x W, got {tuple(fused.shape)}")
        if original.shape[0] != fused.shape[0] or original.shape[2:] != fused.shape[2:]:
            raise ShapeError(
                f"{self.name} discriminator: bad image pair, original {tuple(original.shape)} vs fused {tuple(fused.shape)}"
            )
        logits = self.final(self.body(torch.cat([original, fused], dim=1)))
        probabilities = torch.sigmoid(logits)
        return DiscriminatorOutput(probabilities=probabilities, score=probabilities.mean(dim=(1, 2, 3)))


@dataclass
class FusionModels:
    """Generator plus the thermal and visual discriminators."""

    generator: FusionGenerator
    disc_ir: PatchDiscriminator
    disc_rgb: PatchDiscriminator
    config: ArchitectureConfig

    def named_modules(self) -> Dict[str, nn.Module]:
        return {'generator': self.generator, 'disc_ir': self.disc_ir, 'disc_rgb': self.disc_rgb}

    def to(self, dtype: torch.dtype) -> 'FusionModels':
        for module in self.named_modules().values():
            module.to(dtype)
        return self

    def train(self, mode: bool = True):
        for module in self.named_modules().values():
            module.train(mode)

    def eval(self):
        self.train(False)


@dataclass
class FusedImage:
    """Generator output as an HxWx3 array in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ShapeError(f"Fused image must be HxWx3, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValidationError("Fused image contains non-finite values")


def _initialise(module: nn.Module, generator: torch.Generator):
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * INIT_STD)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm2d) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()


def init_params(seed: int, config: Optional[ArchitectureConfig] = None) -> FusionModels:
    """
    Build the generator and both discriminators with N(0, 0.02) weights.

    Args:
        seed: Initialisation seed; identical seeds give identical parameter bytes
        config: Architecture settings

    Returns:
        FusionModels bundle
    """
    config = config or ArchitectureConfig()
    config.validate()

    models = FusionModels(
        generator=FusionGenerator(config),
        disc_ir=PatchDiscriminator(1, config.disc_width, config.disc_layers, config.activation, 'IR'),
        disc_rgb=PatchDiscriminator(3, config.disc_width, config.disc_layers, config.activation, 'RGB'),
        config=config,
    )
    rng = torch.Generator().manual_seed(int(seed))
    for module in models.named_modules().values():
        _initialise(module, rng)

    logger.info(f"Initialised networks: generator {count_parameters(models.generator):,} params, "
                f"discriminators {count_parameters(models.disc_ir):,} + {count_parameters(models.disc_rgb):,}")
    return models


def count_parameters(params: Union[nn.Module, FusionModels, Iterable]) -> int:
    """
    Exact number of trainable scalars.

    Examples:
        nn.Conv2d(1, 8, 3) -> 3*3*1*8 + 8 = 80
        nn.ModuleList() -> 0
    """
    if isinstance(params, FusionModels):
        return sum(count_parameters(m) for m in params.named_modules().values())
    if isinstance(params, nn.Module):
        tensors = params.parameters()
    else:
        tensors = []
        for item in params:
            tensors.extend(item.parameters() if isinstance(item, nn.Module) else [item])
    return sum(p.numel() for p in tensors if p.requires_grad)


def generator_forward(pair: ImagePair, generator: FusionGenerator) -> Tuple[FusedImage, Optional[Tuple], Dict]:
    """
    Fuse one preprocessed pair.

    Returns:
        (FusedImage, attention maps for the single item or None, intermediate features)
    """
    dtype = next(generator.parameters()).dtype
    visual, thermal = collate([pair], dtype=dtype)
    with torch.no_grad():
        output = generator(visual, thermal)
    fused = output.fused[0].permute(1, 2, 0).cpu().numpy().astype(np.float32)
    maps = None
    if output.attention_maps is not None:
        maps = tuple(m[0] for m in output.attention_maps)
    return FusedImage(fused), maps, output.features


def discriminator_forward(original: RawImage, fused: FusedImage, disc: PatchDiscriminator) -> Tuple[np.ndarray, float]:
    """
    Score one (original, fused) pair.

    Returns:
        (patch probability grid h x w, scalar mean probability)
    """
    dtype = next(disc.parameters()).dtype
    orig = torch.from_numpy(np.ascontiguousarray(original.pixels.transpose(2, 0, 1)))[None].to(dtype)
    fus = torch.from_numpy(np.ascontiguousarray(fused.pixels.transpose(2, 0, 1)))[None].to(dtype)
    with torch.no_grad():
        output = disc(orig, fus)
    return output.probabilities[0, 0].cpu().numpy(), float(output.score[0])
