"""
MISFIT-V Fusion - Training configuration

JSON config files mirror TrainingConfig field-for-field. Dotted overrides
(`weights.lambda_l1=1`) are applied to the raw document before it is parsed,
so the same strict key checking covers both.
"""

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch

from src.data_pipeline import check_target_size
from src.errors import ConfigurationError, ValidationError
from src.fusion_networks import ArchitectureConfig
from src.losses import LossWeights
from src.utils import logger, parse_size

ABLATIONS = ('none', 'l1_weight_1', 'no_kl', 'no_attention')
VARIANTS = ABLATIONS[1:]
PRECISIONS = {'float32': torch.float32, 'float64': torch.float64}


@dataclass
class OptimizerConfig:
    beta1: float = 0.5
    beta2: float = 0.999


@dataclass
class DataConfig:
    dataset_dir: str = 'data/synthetic'
    train_ratio: float = 0.8


@dataclass
class TrainingConfig:
    epochs: int = 20
    learning_rate: float = 1e-4
    batch_size: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    resolution: Tuple[int, int] = (256, 256)
    seed: int = 0
    ablation: str = 'none'
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    data: DataConfig = field(default_factory=DataConfig)
    kl_bins: int = 64
    kl_epsilon: float = 1e-8
    checkpoint_every: int = 0
    log_every: int = 10
    precision: str = 'float32'
    output_dir: str = 'outputs/run'

    def validate(self) -> 'TrainingConfig':
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        if self.kl_bins < 2:
            raise ConfigurationError(f"kl_bins must be >= 2, got {self.kl_bins}")
        if not 0.0 < self.data.train_ratio < 1.0:
            raise ConfigurationError(f"data.train_ratio must be in (0, 1), got {self.data.train_ratio}")
        if not (0.0 <= self.optimizer.beta1 < 1.0 and 0.0 <= self.optimizer.beta2 < 1.0):
            raise ConfigurationError(f"optimizer betas must be in [0, 1), got {self.optimizer}")
        self.weights.validate()
        self.architecture.validate()
        try:
            check_target_size(self.resolution[0], self.resolution[1], self.architecture.size_factor)
        except ValidationError as e:
            raise ConfigurationError(f"resolution: {e}")
        return self

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]

    def effective_weights(self) -> LossWeights:
        """Loss weights with the ablation flag applied."""
        if self.ablation == 'no_kl':
            return replace(self.weights, lambda_kl=0.0)
        if self.ablation == 'l1_weight_1':
            return replace(self.weights, lambda_l1=1.0)
        return self.weights

    def effective_architecture(self) -> ArchitectureConfig:
        if self.ablation == 'no_attention':
            return replace(self.architecture, use_attention=False)
        return self.architecture

    def for_variant(self, variant: str) -> 'TrainingConfig':
        """Copy of this config for an ablation variant, everything else identical."""
        if variant not in VARIANTS:
            raise ValidationError(f"Unknown ablation variant {variant!r}; expected one of {', '.join(VARIANTS)}")
        variant_config = replace(copy.deepcopy(self), ablation=variant)
        variant_config.weights = variant_config.effective_weights()
        variant_config.architecture = variant_config.effective_architecture()
        return variant_config

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['resolution'] = list(self.resolution)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainingConfig':
        """
        Build a config from a JSON document.

        Raises:
            ConfigurationError: listing every unknown key, or on bad values
        """
        unknown = _unknown_keys(data)
        if unknown:
            raise ConfigurationError(f"Unknown config keys: {', '.join(unknown)}")

        values = dict(data)
        try:
            if 'weights' in values:
                values['weights'] = LossWeights.from_dict(values['weights'])
            if 'optimizer' in values:
                values['optimizer'] = OptimizerConfig(**values['optimizer'])
            if 'architecture' in values:
                values['architecture'] = ArchitectureConfig.from_dict(values['architecture'])
            if 'data' in values:
                values['data'] = DataConfig(**values['data'])
            if 'resolution' in values:
                values['resolution'] = _parse_resolution(values['resolution'])
        except TypeError as e:
            raise ConfigurationError(f"Malformed config section: {e}")
        return cls(**values)


_SECTIONS = {
    'weights': LossWeights,
    'optimizer': OptimizerConfig,
    'architecture': ArchitectureConfig,
    'data': DataConfig,
}


def _unknown_keys(data: Dict[str, Any]) -> List[str]:
    top = {f.name for f in fields(TrainingConfig)}
    unknown = [k for k in data if k not in top]
    for section, section_cls in _SECTIONS.items():
        value = data.get(section)
        if isinstance(value, dict):
            allowed = {f.name for f in fields(section_cls)}
            unknown.extend(f"{section}.{k}" for k in value if k not in allowed)
    return sorted(unknown)


def _parse_resolution(value) -> Tuple[int, int]:
    if isinstance(value, str):
        return parse_size(value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return int(value[0]), int(value[1])
    raise ConfigurationError(f"resolution must be [H, W] or 'HxW', got {value!r}")


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(document: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Apply dotted `path=value` overrides to a raw config document.

    Values are parsed as JSON literals, falling back to plain strings.

    Examples:
        ['weights.lambda_l1=1'] -> document['weights']['lambda_l1'] == 1
        ['seed=7', 'data.dataset_dir=data/x']
    """
    result = copy.deepcopy(document)
    defaults = TrainingConfig().to_dict()
    for item in overrides:
        if '=' not in item:
            raise ConfigurationError(f"Override must look like key=value, got {item!r}")
        path, raw = item.split('=', 1)
        keys = path.strip().split('.')

        # Validate the path against the schema, not the partial document
        schema = defaults
        for key in keys[:-1]:
            if not isinstance(schema, dict) or key not in schema or not isinstance(schema[key], dict):
                raise ConfigurationError(f"Unknown override path: {path}")
            schema = schema[key]
        if keys[-1] not in schema:
            raise ConfigurationError(f"Unknown override path: {path}")

        target = result
        for key in keys[:-1]:
            target = target.setdefault(key, {})
        target[keys[-1]] = _parse_value(raw)
        logger.info(f"Config override: {path} = {target[keys[-1]]!r}")
    return result


def load_config(path: Optional[str] = None, overrides: Sequence[str] = (),
                fallback_seed: Optional[int] = None) -> TrainingConfig:
    """
    Load, override and validate a training config.

    Args:
        path: JSON config file; None starts from defaults
        overrides: Dotted `k=v` strings
        fallback_seed: Seed used only when neither the file nor an override sets one

    Returns:
        Validated TrainingConfig
    """
    document: Dict[str, Any] = {}
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"File not found: {path}")
        with open(path) as f:
            try:
                document = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"Config {path} is not valid JSON: {e}")
        if not isinstance(document, dict):
            raise ConfigurationError(f"Config {path} must hold a JSON object")
    document = apply_overrides(document, overrides)
    if fallback_seed is not None and 'seed' not in document:
        document['seed'] = int(fallback_seed)
    config = TrainingConfig.from_dict(document).validate()
    logger.info(f"Loaded config: {path or '<defaults>'} ({config.resolution[0]}x{config.resolution[1]}, "
                f"{config.epochs} epochs, ablation={config.ablation})")
    return config
