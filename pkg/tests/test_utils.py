"""Tests for seeding, size parsing and file helpers."""

import pandas as pd
import pytest

from src.errors import ConfigurationError
from src.utils import (SEED_ENV_VAR, derive_seed, ensure_writable_dir, load_json, parse_size, resolve_seed,
                       save_json, save_table)


class TestSeeds:
    def test_derive_seed_is_stable_and_distinct(self):
        assert derive_seed(7, 3) == derive_seed(7, 3)
        assert derive_seed(7, 0) != derive_seed(7, 1)
        assert derive_seed(7, 0) != derive_seed(8, 0)

    def test_explicit_seed_wins_over_environment(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, '11')
        assert resolve_seed(5) == 5

    def test_environment_fallback(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, '11')
        assert resolve_seed(None) == 11

    def test_default_when_unset(self, monkeypatch):
        monkeypatch.delenv(SEED_ENV_VAR, raising=False)
        assert resolve_seed(None, default=3) == 3

    def test_non_integer_environment_is_rejected(self, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, 'abc')
        with pytest.raises(ConfigurationError, match=SEED_ENV_VAR):
            resolve_seed(None)


class TestParseSize:
    def test_parses_both_cases(self):
        assert parse_size('256x256') == (256, 256)
        assert parse_size('64X48') == (64, 48)

    @pytest.mark.parametrize('text', ['256', '0x64', 'axb', '64x64x3'])
    def test_rejects_malformed(self, text):
        with pytest.raises(ConfigurationError):
            parse_size(text)


class TestFiles:
    def test_ensure_writable_dir_creates_nested(self, tmp_path):
        directory = ensure_writable_dir(str(tmp_path / 'a' / 'b'))
        assert directory.is_dir()

    def test_json_round_trip(self, tmp_path):
        path = str(tmp_path / 'sub' / 'doc.json')
        save_json({'x': [1, 2.5]}, path)
        assert load_json(path) == {'x': [1, 2.5]}

    def test_missing_json_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match='nope.json'):
            load_json(str(tmp_path / 'nope.json'))

    def test_save_table_writes_csv(self, tmp_path):
        path = str(tmp_path / 'table.csv')
        save_table(pd.DataFrame({'step': [0, 1], 'total': [1.5, 0.25]}), path)
        assert pd.read_csv(path)['total'].tolist() == [1.5, 0.25]
