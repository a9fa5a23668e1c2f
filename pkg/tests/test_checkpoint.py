"""Tests for the .mfck checkpoint container."""

import struct

import numpy as np
import pytest
import torch

from src.checkpoint import (FORMAT_VERSION, MAGIC, Checkpoint, capture_state, decode_checkpoint,
                            encode_checkpoint, load_checkpoint, restore_state, save_checkpoint)
from src.errors import CheckpointError, CheckpointIntegrityError, CheckpointVersionError
from src.fusion_networks import init_params
from src.trainer import build_optimizers, train_step


@pytest.fixture
def checkpoint(tiny_config, rng):
    arrays = {
        'generator.w': rng.normal(size=(3, 4)).astype(np.float32),
        'disc_ir.b': rng.normal(size=(5,)),
        'opt.generator.state.0.step': np.array(3.0, dtype=np.float32),
        'mask': np.array([1, 0, 2], dtype=np.int64),
    }
    return Checkpoint(config=tiny_config, step=12, arrays=arrays, epoch=1, batch_index=2,
                      extras={'history': [{'step': 0, 'total': 1.25}]})


def _assert_same(a: Checkpoint, b: Checkpoint):
    assert a.config == b.config
    assert (a.step, a.epoch, a.batch_index) == (b.step, b.epoch, b.batch_index)
    assert a.extras == b.extras
    assert sorted(a.arrays) == sorted(b.arrays)
    for name, array in a.arrays.items():
        assert array.dtype == b.arrays[name].dtype, name
        assert array.tobytes() == b.arrays[name].tobytes(), name


class TestContainer:
    def test_round_trip_is_bitwise(self, checkpoint, tmp_path):
        path = save_checkpoint(checkpoint, str(tmp_path / 'run' / 'a.mfck'))
        _assert_same(checkpoint, load_checkpoint(path))

    def test_header_layout(self, checkpoint):
        blob = encode_checkpoint(checkpoint)
        assert blob[:4] == MAGIC
        assert struct.unpack_from('<H', blob, 4)[0] == FORMAT_VERSION

    def test_wrong_version(self, checkpoint):
        blob = bytearray(encode_checkpoint(checkpoint))
        struct.pack_into('<H', blob, 4, FORMAT_VERSION + 1)
        with pytest.raises(CheckpointVersionError, match=str(FORMAT_VERSION + 1)):
            decode_checkpoint(bytes(blob))

    def test_truncated_file(self, checkpoint, tmp_path):
        path = tmp_path / 'cut.mfck'
        path.write_bytes(encode_checkpoint(checkpoint)[:-10])
        with pytest.raises(CheckpointIntegrityError, match='truncated'):
            load_checkpoint(str(path))

    def test_truncated_header(self):
        with pytest.raises(CheckpointIntegrityError):
            decode_checkpoint(MAGIC + b'\x01')

    def test_flipped_payload_byte(self, checkpoint):
        blob = bytearray(encode_checkpoint(checkpoint))
        blob[-1] ^= 0xFF
        with pytest.raises(CheckpointIntegrityError, match='checksum'):
            decode_checkpoint(bytes(blob))

    def test_bad_magic(self, checkpoint):
        blob = b'XXXX' + encode_checkpoint(checkpoint)[4:]
        with pytest.raises(CheckpointIntegrityError, match='magic'):
            decode_checkpoint(blob)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(str(tmp_path / 'none.mfck'))

    def test_big_endian_arrays_stored_little_endian(self, checkpoint):
        checkpoint.arrays['be'] = np.arange(4, dtype='>f8')
        decoded = decode_checkpoint(encode_checkpoint(checkpoint))
        np.testing.assert_array_equal(decoded.arrays['be'], np.arange(4.0))

    def test_save_leaves_no_temp_files(self, checkpoint, tmp_path):
        save_checkpoint(checkpoint, str(tmp_path / 'a.mfck'))
        save_checkpoint(checkpoint, str(tmp_path / 'a.mfck'))
        assert [p.name for p in tmp_path.iterdir()] == ['a.mfck']


class TestTrainingState:
    def test_capture_restore_after_a_step(self, tiny_config, scenes):
        models = init_params(tiny_config.seed, tiny_config.architecture)
        optimizers = build_optimizers(models, tiny_config)
        train_step(scenes[:4], models, optimizers, tiny_config, step=0)
        blob = encode_checkpoint(capture_state(models, optimizers, tiny_config, step=1))

        restored = init_params(99, tiny_config.architecture)
        restored_opts = build_optimizers(restored, tiny_config)
        restore_state(decode_checkpoint(blob), restored, restored_opts)

        for name, module in models.named_modules().items():
            other = restored.named_modules()[name].state_dict()
            for key, value in module.state_dict().items():
                assert torch.equal(value, other[key]), f"{name}.{key}"
        for name, optimizer in optimizers.items():
            original = optimizer.state_dict()
            loaded = restored_opts[name].state_dict()
            assert original['param_groups'] == loaded['param_groups']
            for index, state in original['state'].items():
                for key, value in state.items():
                    assert torch.equal(torch.as_tensor(value), torch.as_tensor(loaded['state'][index][key]))

    def test_architecture_mismatch(self, tiny_config):
        models = init_params(0, tiny_config.architecture)
        ckpt = capture_state(models, None, tiny_config, step=0)
        other = init_params(0, tiny_config.for_variant('no_attention').architecture)
        with pytest.raises(CheckpointError):
            restore_state(ckpt, other)
