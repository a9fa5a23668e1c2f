"""Tests for training configuration loading, overrides and ablation variants."""

import json

import pytest

from src.config import VARIANTS, TrainingConfig, apply_overrides, load_config
from src.errors import ConfigurationError, ValidationError
from tests.conftest import CONFIG_DIR


class TestDefaults:
    def test_training_hyperparameters(self):
        config = TrainingConfig().validate()
        assert config.epochs == 20
        assert config.learning_rate == 1e-4
        assert config.batch_size == 4
        assert config.optimizer.beta1 == 0.5
        assert config.weights.lambda_l1 == 100

    def test_dict_round_trip(self, tiny_config):
        assert TrainingConfig.from_dict(tiny_config.to_dict()) == tiny_config

    @pytest.mark.parametrize('path', ['default.json', 'smoke.json', 'tiny.json'])
    def test_shipped_configs_load(self, path):
        config = load_config(str(CONFIG_DIR / path))
        assert config.ablation == 'none'


class TestValidation:
    def test_resolution_must_divide_by_network_factor(self):
        with pytest.raises(ConfigurationError, match='divisible'):
            TrainingConfig(resolution=(40, 40)).validate()

    def test_learning_rate_positive(self):
        with pytest.raises(ConfigurationError):
            TrainingConfig(learning_rate=0.0).validate()

    def test_epochs_positive(self):
        with pytest.raises(ConfigurationError):
            TrainingConfig(epochs=0).validate()

    def test_unknown_ablation(self):
        with pytest.raises(ConfigurationError):
            TrainingConfig(ablation='no_gan').validate()

    def test_every_unknown_key_listed(self):
        with pytest.raises(ConfigurationError, match='bogus.*weights.lambda_x'):
            TrainingConfig.from_dict({'bogus': 1, 'weights': {'lambda_x': 2}})


class TestVariants:
    def test_l1_weight_1_changes_only_l1(self, tiny_config):
        variant = tiny_config.for_variant('l1_weight_1')
        assert variant.weights.lambda_l1 == 1
        assert variant.weights.lambda_kl == tiny_config.weights.lambda_kl
        assert variant.ablation == 'l1_weight_1'
        assert variant.seed == tiny_config.seed
        assert variant.architecture == tiny_config.architecture
        assert tiny_config.weights.lambda_l1 == 100

    def test_no_kl_zeroes_kl_weight(self, tiny_config):
        assert tiny_config.for_variant('no_kl').effective_weights().lambda_kl == 0.0

    def test_no_attention_switches_architecture(self, tiny_config):
        variant = tiny_config.for_variant('no_attention')
        assert not variant.architecture.use_attention
        assert variant.weights == tiny_config.weights

    def test_unknown_variant(self, tiny_config):
        with pytest.raises(ValidationError, match=VARIANTS[0]):
            tiny_config.for_variant('no_gan')


class TestOverrides:
    def test_nested_override(self):
        document = apply_overrides({}, ['weights.lambda_l1=1', 'seed=7', 'data.dataset_dir=data/x'])
        assert document == {'weights': {'lambda_l1': 1}, 'seed': 7, 'data': {'dataset_dir': 'data/x'}}

    def test_list_value(self):
        assert apply_overrides({}, ['resolution=[64, 64]'])['resolution'] == [64, 64]

    @pytest.mark.parametrize('item', ['weights.nope=1', 'seed.x=1', 'missing_equals'])
    def test_bad_override(self, item):
        with pytest.raises(ConfigurationError):
            apply_overrides({}, [item])

    def test_load_with_overrides(self, tmp_path):
        path = tmp_path / 'config.json'
        path.write_text(json.dumps({'epochs': 3, 'resolution': [64, 64]}))
        config = load_config(str(path), ['ablation=no_kl', 'resolution=32x32', 'architecture.unet_depth=2',
                                         'architecture.down_blocks=1'])
        assert config.epochs == 3
        assert config.ablation == 'no_kl'
        assert config.resolution == (32, 32)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match='absent.json'):
            load_config(str(tmp_path / 'absent.json'))

    def test_malformed_json(self, tmp_path):
        path = tmp_path / 'bad.json'
        path.write_text('{"epochs": ')
        with pytest.raises(ConfigurationError):
            load_config(str(path))


class TestFallbackSeed:
    def test_fills_missing_seed(self, tmp_path):
        path = tmp_path / 'config.json'
        path.write_text(json.dumps({'epochs': 1}))
        assert load_config(str(path), fallback_seed=7).seed == 7

    def test_file_seed_wins(self, tmp_path):
        path = tmp_path / 'config.json'
        path.write_text(json.dumps({'seed': 3}))
        assert load_config(str(path), fallback_seed=7).seed == 3

    def test_override_seed_wins(self):
        assert load_config(None, ['seed=5'], fallback_seed=7).seed == 5

    def test_defaults_to_zero(self):
        assert load_config(None).seed == 0
