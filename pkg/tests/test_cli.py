"""End-to-end tests for the command line."""

import shutil

import cv2
import numpy as np
import pandas as pd
import pytest

import src.trainer as trainer
from src.checkpoint import load_checkpoint
from src.cli import COMMANDS, build_parser, main
from src.fusion_metrics import PSNR_CAP_DB, load_report
from src.utils import SEED_ENV_VAR, load_json, save_json
from tests.conftest import CONFIG_DIR


@pytest.fixture(scope='module')
def workspace(tmp_path_factory):
    """Synthetic corpus plus a tiny checkpoint trained on it through the CLI."""
    root = tmp_path_factory.mktemp('cli')
    data = root / 'data'
    assert main(['generate-data', '--out', str(data), '--count', '6', '--size', '32x32',
                 '--misalign', '2,1,0,1,0,0', '--seed', '3']) == 0
    run = root / 'run'
    assert main(['--quiet', 'train', '--config', str(CONFIG_DIR / 'tiny.json'),
                 '--data', str(data), '--out', str(run)]) == 0
    return {'root': root, 'data': data, 'checkpoint': run / 'final.mfck', 'run': run}


def _write_raw(path, h, w, channels, seed):
    pixels = np.random.default_rng(seed).integers(0, 256, size=(h, w, channels), dtype=np.uint8)
    cv2.imwrite(str(path), pixels if channels == 3 else pixels[..., 0])
    return str(path)


class TestParser:
    def test_every_command_registered(self):
        parser = build_parser()
        for command in COMMANDS:
            assert parser.parse_args([command] + {
                'generate-data': ['--out', 'x'],
                'train': [],
                'fuse': ['--checkpoint', 'c', '--visual', 'v', '--thermal', 't', '--out', 'o'],
                'evaluate': ['--data', 'd', '--out', 'o'],
                'ablate': ['--out', 'o'],
                'gradcheck': [],
                'compare': ['--reports', 'r', '--out', 'o'],
            }[command]).command == command

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(['explode'])


class TestGenerateData:
    def test_small_size_warns_but_succeeds(self, tmp_path, capsys):
        assert main(['generate-data', '--out', str(tmp_path), '--count', '2', '--size', '32x32']) == 0
        out = capsys.readouterr().out
        assert 'minimum' in out
        assert (tmp_path / 'scene_0001_ir.png').exists()
        assert load_json(str(tmp_path / 'manifest.json'))['count'] == 2

    def test_bad_size(self, tmp_path):
        assert main(['generate-data', '--out', str(tmp_path), '--size', 'big']) == 1

    def test_zero_count(self, tmp_path):
        assert main(['generate-data', '--out', str(tmp_path), '--count', '0']) == 1


class TestTrain:
    def test_outputs(self, workspace):
        run = workspace['run']
        assert workspace['checkpoint'].exists()
        log = pd.read_csv(run / 'training_log.csv')
        assert list(log['step']) == list(range(len(log)))
        assert any(p.name.startswith('training_curves') for p in run.iterdir())

    def test_missing_dataset(self, tmp_path):
        code = main(['train', '--config', str(CONFIG_DIR / 'tiny.json'), '--data', str(tmp_path / 'none'),
                     '--out', str(tmp_path / 'run')])
        assert code == 1

    def test_bad_override(self, tmp_path):
        assert main(['train', '--config', str(CONFIG_DIR / 'tiny.json'), '--override', 'epochs=0']) == 1


class TestSeedPrecedence:
    def _config(self, tmp_path, seed):
        document = load_json(str(CONFIG_DIR / 'tiny.json'))
        document.pop('seed')
        if seed is not None:
            document['seed'] = seed
        return save_json(document, str(tmp_path / 'config.json'))

    def _trained_seed(self, workspace, tmp_path, config, *extra):
        out = tmp_path / 'run'
        assert main(['--quiet', 'train', '--config', config, '--data', str(workspace['data']),
                     '--out', str(out), '--max-steps', '1', *extra]) == 0
        return load_checkpoint(str(out / 'final.mfck')).config.seed

    def test_config_seed_beats_environment(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, '7')
        assert self._trained_seed(workspace, tmp_path, self._config(tmp_path, 3)) == 3

    def test_flag_beats_config_and_environment(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, '7')
        assert self._trained_seed(workspace, tmp_path, self._config(tmp_path, 3), '--seed', '5') == 5

    def test_environment_fills_missing_seed(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, '7')
        assert self._trained_seed(workspace, tmp_path, self._config(tmp_path, None)) == 7

    def test_default_seed(self, workspace, tmp_path, monkeypatch):
        monkeypatch.delenv(SEED_ENV_VAR, raising=False)
        assert self._trained_seed(workspace, tmp_path, self._config(tmp_path, None)) == 0


class TestFuse:
    def test_fuse_with_heatmaps(self, workspace, tmp_path):
        data = workspace['data']
        out = tmp_path / 'fused.png'
        code = main(['fuse', '--checkpoint', str(workspace['checkpoint']),
                     '--visual', str(data / 'scene_0000_rgb.png'), '--thermal', str(data / 'scene_0000_ir.png'),
                     '--out', str(out), '--heatmaps', str(tmp_path / 'heat')])
        assert code == 0
        assert cv2.imread(str(out)).shape == (32, 32, 3)
        heatmaps = sorted(p.name for p in (tmp_path / 'heat').iterdir())
        assert heatmaps == ['heatmap_ir_to_rgb.png', 'heatmap_rgb_to_ir.png']

    def test_raw_sensor_sizes(self, workspace, tmp_path):
        visual = _write_raw(tmp_path / 'v.png', 512, 640, 3, 0)
        thermal = _write_raw(tmp_path / 't.png', 256, 336, 1, 1)
        out = tmp_path / 'fused.png'
        assert main(['fuse', '--checkpoint', str(workspace['checkpoint']), '--visual', visual,
                     '--thermal', thermal, '--out', str(out)]) == 0
        assert cv2.imread(str(out)).shape == (32, 32, 3)

    def test_size_mismatch(self, workspace, tmp_path):
        data = workspace['data']
        code = main(['fuse', '--checkpoint', str(workspace['checkpoint']), '--size', '64x64',
                     '--visual', str(data / 'scene_0000_rgb.png'), '--thermal', str(data / 'scene_0000_ir.png'),
                     '--out', str(tmp_path / 'fused.png')])
        assert code == 1

    def test_missing_checkpoint(self, workspace, tmp_path):
        data = workspace['data']
        code = main(['fuse', '--checkpoint', str(tmp_path / 'none.mfck'),
                     '--visual', str(data / 'scene_0000_rgb.png'), '--thermal', str(data / 'scene_0000_ir.png'),
                     '--out', str(tmp_path / 'fused.png')])
        assert code == 1

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        bad = tmp_path / 'bad.mfck'
        blob = bytearray(workspace['checkpoint'].read_bytes())
        blob[-1] ^= 0xFF
        bad.write_bytes(bytes(blob))
        data = workspace['data']
        code = main(['fuse', '--checkpoint', str(bad),
                     '--visual', str(data / 'scene_0000_rgb.png'), '--thermal', str(data / 'scene_0000_ir.png'),
                     '--out', str(tmp_path / 'fused.png')])
        assert code == 2


class TestEvaluate:
    def test_checkpoint_report(self, workspace, tmp_path):
        out = tmp_path / 'report.json'
        code = main(['evaluate', '--checkpoint', str(workspace['checkpoint']), '--data', str(workspace['data']),
                     '--out', str(out), '--plot', str(tmp_path / 'charts'), '--panels', str(tmp_path / 'panels')])
        assert code == 0
        report = load_report(str(out))
        assert report.metadata['n_items'] == 6
        assert 0.0 <= report.metadata['hotspot_hit_rate'] <= 1.0
        assert len(pd.read_csv(tmp_path / 'report.csv')) == 6
        assert len(list((tmp_path / 'charts').iterdir())) == 5
        assert len(list((tmp_path / 'panels').iterdir())) == 6

    def test_existing_fused_images(self, workspace, tmp_path):
        fused_dir = tmp_path / 'fused'
        fused_dir.mkdir()
        for path in workspace['data'].glob('*_rgb.png'):
            shutil.copy(path, fused_dir / path.name.replace('_rgb', '_fused'))
        out = tmp_path / 'report.json'
        code = main(['evaluate', '--fused-dir', str(fused_dir), '--data', str(workspace['data']),
                     '--size', '32x32', '--out', str(out), '--label', 'copy'])
        assert code == 0
        report = load_report(str(out))
        assert report.vs_visual['PSNR'] == PSNR_CAP_DB
        assert report.metadata['run_id'] == 'copy'

    def test_needs_a_source_of_fused_images(self, workspace, tmp_path):
        assert main(['evaluate', '--data', str(workspace['data']), '--out', str(tmp_path / 'r.json')]) == 1


class TestCompareAndAblate:
    def test_compare_reports(self, workspace, tmp_path):
        paths = []
        for label in ('a', 'b'):
            path = tmp_path / f"{label}.json"
            assert main(['evaluate', '--checkpoint', str(workspace['checkpoint']),
                         '--data', str(workspace['data']), '--out', str(path)]) == 0
            paths.append(str(path))
        out = tmp_path / 'compare'
        assert main(['compare', '--reports', *paths, '--labels', 'first', 'second', '--out', str(out)]) == 0
        table = pd.read_csv(out / 'comparison.csv')
        assert table.shape == (2, 11)
        assert list(table['run']) == ['first', 'second']
        values = table.drop(columns='run').to_numpy()
        np.testing.assert_array_equal(values[0], values[1])
        np.testing.assert_array_equal(np.abs(values), 1.0)

    @pytest.mark.parametrize('variants', ['no_gan', ' , '])
    def test_ablate_rejects_variant_lists(self, workspace, tmp_path, variants):
        code = main(['ablate', '--config', str(CONFIG_DIR / 'tiny.json'), '--data', str(workspace['data']),
                     '--variants', variants, '--out', str(tmp_path / 'ablation')])
        assert code == 1

    def test_ablate_missing_dataset_writes_nothing(self, tmp_path):
        out = tmp_path / 'ablation'
        code = main(['ablate', '--config', str(CONFIG_DIR / 'tiny.json'), '--data', str(tmp_path / 'none'),
                     '--out', str(out)])
        assert code == 1
        assert not out.exists()

    def test_gradcheck(self, capsys):
        assert main(['gradcheck', '--seed', '0', '--max-coords', '2']) == 0
        assert '✓' in capsys.readouterr().out

    def test_gradcheck_fails_on_wrong_gradients(self, monkeypatch, capsys):
        healthy = trainer.analytic_gradients

        def scaled(models, loss_fn):
            return {name: grad * 1.5 for name, grad in healthy(models, loss_fn).items()}

        monkeypatch.setattr(trainer, 'analytic_gradients', scaled)
        assert main(['gradcheck', '--seed', '0', '--max-coords', '2']) == 2
        assert '✗' in capsys.readouterr().out
