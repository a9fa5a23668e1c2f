"""Tests for the fusion generator and the patch discriminators."""

import numpy as np
import pytest
import torch
import torch.nn as nn

from src.errors import ConfigurationError, ModalityError, ShapeError, ValidationError
from src.fusion_networks import (ArchitectureConfig, FusedImage, UNet, count_parameters, discriminator_forward,
                                 generator_forward, init_params)
from src.trainer import tiny_architecture
from tests.conftest import make_pair


@pytest.fixture
def models():
    return init_params(0, tiny_architecture()).to(torch.float64)


def _batch(rng, b=2, size=32):
    visual = torch.from_numpy(rng.random((b, 3, size, size)))
    thermal = torch.from_numpy(rng.random((b, 1, size, size)))
    return visual, thermal


class TestArchitectureConfig:
    def test_derived_factors(self):
        config = ArchitectureConfig()
        assert config.feature_dim == 128
        assert config.downsample_factor == 4
        assert config.size_factor == 16

    def test_unet_channel_mismatch_names_layer(self):
        with pytest.raises(ConfigurationError, match='unet.encoder.0'):
            ArchitectureConfig(base_width=8, unet_in_channels=12).validate()

    def test_unknown_keys(self):
        with pytest.raises(ConfigurationError, match='depth'):
            ArchitectureConfig.from_dict({'depth': 3})


class TestCountParameters:
    def test_conv(self):
        assert count_parameters(nn.Conv2d(1, 8, 3)) == 80

    def test_empty(self):
        assert count_parameters(nn.ModuleList()) == 0

    def test_iterable_of_modules(self):
        assert count_parameters([nn.Linear(2, 3), nn.Linear(3, 1)]) == 9 + 4


class TestInitialisation:
    def test_same_seed_same_bytes(self):
        a = init_params(5, tiny_architecture())
        b = init_params(5, tiny_architecture())
        for name, module in a.named_modules().items():
            other = b.named_modules()[name].state_dict()
            for key, value in module.state_dict().items():
                assert torch.equal(value, other[key]), key

    def test_different_seed_differs(self):
        a = init_params(5, tiny_architecture()).generator.state_dict()
        b = init_params(6, tiny_architecture()).generator.state_dict()
        assert not torch.equal(a['down_rgb.stem.0.weight'], b['down_rgb.stem.0.weight'])

    def test_discriminator_modalities(self, models):
        assert models.disc_ir.original_channels == 1
        assert models.disc_rgb.original_channels == 3


class TestGenerator:
    def test_output_contract(self, models, rng):
        output = models.generator(*_batch(rng))
        assert output.fused.shape == (2, 3, 32, 32)
        assert bool(((output.fused > 0) & (output.fused < 1)).all())
        map_rgb_to_ir, map_ir_to_rgb = output.attention_maps
        assert map_rgb_to_ir.shape == (2, 256, 256)
        np.testing.assert_allclose(map_ir_to_rgb.sum(dim=-1).detach().numpy(), 1.0, atol=1e-6)

    def test_attention_gates_downsampled_features(self, models, rng):
        features = models.generator(*_batch(rng)).features
        assert features['gated_rgb'].shape == features['down_rgb'].shape
        assert features['up_rgb'].shape[2:] == (32, 32)

    def test_no_attention_uses_identity(self, rng):
        config = ArchitectureConfig(**{**tiny_architecture().to_dict(), 'use_attention': False})
        plain = init_params(0, config).to(torch.float64)
        output = plain.generator(*_batch(rng))
        assert output.attention_maps is None
        assert torch.equal(output.features['gated_ir'], output.features['down_ir'])
        full = init_params(0, tiny_architecture())
        assert count_parameters(plain.generator) < count_parameters(full.generator)

    def test_size_mismatch(self, models, rng):
        visual, _ = _batch(rng)
        with pytest.raises(ShapeError, match='not preprocessed'):
            models.generator(visual, torch.zeros(2, 1, 16, 16, dtype=torch.float64))

    def test_non_divisible_input(self, models, rng):
        with pytest.raises(ShapeError, match='divisible'):
            models.generator(*_batch(rng, size=30))

    def test_swapped_modalities(self, models, rng):
        visual, thermal = _batch(rng)
        with pytest.raises(ShapeError):
            models.generator(thermal, visual)

    def test_generator_forward_single_pair(self, rng):
        models = init_params(0, tiny_architecture())
        fused, maps, _ = generator_forward(make_pair(rng), models.generator)
        assert isinstance(fused, FusedImage)
        assert fused.pixels.shape == (32, 32, 3)
        assert maps[0].shape == (256, 256)

    def test_unet_preserves_resolution(self):
        unet = UNet(6, 4, 3, 'leaky_relu')
        assert unet(torch.zeros(1, 6, 16, 16)).shape == (1, 4, 16, 16)


class TestDiscriminator:
    def test_patch_grid_and_score(self, models, rng):
        visual, thermal = _batch(rng)
        fused = models.generator(visual, thermal).fused
        output = models.disc_ir(thermal, fused)
        assert output.probabilities.shape == (2, 1, 8, 8)
        assert output.score.shape == (2,)
        assert bool(((output.score > 0) & (output.score < 1)).all())

    def test_wrong_modality(self, models, rng):
        visual, _ = _batch(rng)
        with pytest.raises(ModalityError, match='wrong modality'):
            models.disc_ir(visual, visual)

    def test_bad_fused_image(self, models, rng):
        visual, thermal = _batch(rng)
        with pytest.raises(ShapeError, match='bad fused image'):
            models.disc_rgb(visual, thermal)

    def test_size_mismatch(self, models, rng):
        visual, _ = _batch(rng)
        with pytest.raises(ShapeError, match='bad image pair'):
            models.disc_rgb(visual, visual[:, :, :16, :16])

    def test_discriminator_forward(self, rng):
        models = init_params(1, tiny_architecture())
        pair = make_pair(rng)
        grid, score = discriminator_forward(pair.thermal, FusedImage(pair.visual.pixels), models.disc_ir)
        assert grid.shape == (8, 8)
        assert score == pytest.approx(float(grid.mean()), abs=1e-6)

    def test_fused_image_rejects_non_finite(self):
        pixels = np.zeros((8, 8, 3), dtype=np.float32)
        pixels[0, 0, 0] = np.inf
        with pytest.raises(ValidationError):
            FusedImage(pixels)
