#!/usr/bin/env python3
"""
Unit tests for experiment config parsing and validation.
"""

import json
import os
import tempfile
from io import StringIO

import pytest
import yaml

from bo_models import ConfigError, FantasyMode
from experiment_config import (
    OUTPUT_DIR_ENV,
    config_from_dict,
    config_to_dict,
    parse_config,
    serialize_config,
)


class TestConfigDefaults:

    @pytest.fixture(autouse=True)
    def no_output_override(self, monkeypatch):
        monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)

    def test_minimal_config(self):
        config = config_from_dict({'benchmark': 'branin2', 'acquisition': 'dkg'})
        assert config.mode == FantasyMode.FULL
        assert config.q == 4
        assert config.iterations == 10
        assert config.replications == 1
        assert config.noise_sigma == 0.5
        assert config.output_dir == 'results'
        assert config.budgets.fantasies == 256
        assert config.budgets.walkers is None
        assert config.figure1.length_scale == 0.15
        assert config.figure1.seed == 2

    @pytest.mark.parametrize("benchmark,acquisition,mode,mask", [
        ('branin2', 'dkg', FantasyMode.FULL, None),
        ('rosenbrock3', 'dkg', FantasyMode.MASKED, (2,)),
        ('cosine8', 'dei', FantasyMode.MASKED, (0, 1)),
        ('hartmann6', 'kg', FantasyMode.VALUE, None),
        ('levy4', 'ei', FantasyMode.VALUE, None),
        ('ackley5', 'ucbpe', FantasyMode.VALUE, None),
    ])
    def test_default_mode_follows_benchmark(self, benchmark, acquisition, mode, mask):
        config = config_from_dict({'benchmark': benchmark, 'acquisition': acquisition})
        assert config.mode == mode
        assert config.mask == mask

    def test_mask_flags(self):
        config = config_from_dict({'benchmark': 'levy4', 'acquisition': 'dkg', 'mask': [3, 1]})
        assert config.mode == FantasyMode.MASKED
        assert config.mask == (1, 3)
        assert config.mask_flags(4) == (False, True, False, True)

    def test_directional_mode(self):
        config = config_from_dict({'benchmark': 'hartmann6', 'acquisition': 'dkg', 'mode': 'directional'})
        assert config.mode == FantasyMode.DIRECTIONAL
        assert config.mask_flags(6) == (True,) * 6

    def test_environment_overrides_output_dir(self, monkeypatch):
        monkeypatch.setenv(OUTPUT_DIR_ENV, '/tmp/elsewhere')
        config = config_from_dict({'benchmark': 'branin2', 'acquisition': 'ei', 'output_dir': 'mine'})
        assert config.output_dir == '/tmp/elsewhere'

    def test_round_trip(self):
        config = config_from_dict({'benchmark': 'rosenbrock3', 'acquisition': 'dkg', 'q': 2, 'seed': 9,
                                   'budgets': {'fantasies': 32, 'walkers': 24}})
        assert config_from_dict(config_to_dict(config)) == config
        buffer = StringIO()
        serialize_config(config, buffer)
        assert config_from_dict(yaml.safe_load(buffer.getvalue())) == config


class TestConfigErrors:

    @pytest.mark.parametrize("document,key_path", [
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'colour': 'red'}, 'colour'),
        ({'acquisition': 'dkg'}, 'benchmark'),
        ({'benchmark': 'sphere', 'acquisition': 'dkg'}, 'benchmark'),
        ({'benchmark': 'branin2', 'acquisition': 'pi'}, 'acquisition'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'q': 0}, 'q'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'iterations': 'ten'}, 'iterations'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'noise_sigma': -1}, 'noise_sigma'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'mask': [5]}, 'mask.0'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'mask': [0, 0]}, 'mask'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'mode': 'sideways'}, 'mode'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'mode': 'value'}, 'mode'),
        ({'benchmark': 'branin2', 'acquisition': 'ei', 'mode': 'full'}, 'mode'),
        ({'benchmark': 'branin2', 'acquisition': 'dei', 'mode': 'directional'}, 'mode'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'mode': 'full', 'mask': [0]}, 'mask'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'budgets': {'fantasies': 0}}, 'budgets.fantasies'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'budgets': {'speed': 1}}, 'budgets.speed'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'budgets': {'raw_samples': 1}}, 'budgets.raw_samples'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'figure1': {'seed': -1}}, 'figure1.seed'),
        ({'benchmark': 'branin2', 'acquisition': 'dkg', 'figure1': {'length_scale': 0}}, 'figure1.length_scale'),
    ])
    def test_error_names_key_path(self, document, key_path):
        with pytest.raises(ConfigError) as exc_info:
            config_from_dict(document)
        assert exc_info.value.key_path == key_path
        assert str(exc_info.value).startswith(f"{key_path}: ")

    def test_non_mapping_document(self):
        with pytest.raises(ConfigError):
            config_from_dict(['branin2'])


class TestParseConfig:

    def _write(self, text, suffix):
        with tempfile.NamedTemporaryFile(mode='w', delete=False, suffix=suffix, encoding='utf-8') as f:
            f.write(text)
            return f.name

    def test_yaml_and_json_files(self):
        yaml_path = self._write("benchmark: branin2\nacquisition: kg\nq: 2\n", '.yaml')
        json_path = self._write(json.dumps({'benchmark': 'branin2', 'acquisition': 'kg', 'q': 2}), '.json')
        try:
            assert parse_config(yaml_path) == parse_config(json_path)
        finally:
            os.unlink(yaml_path)
            os.unlink(json_path)

    def test_missing_file(self):
        with pytest.raises(ConfigError, match="not found"):
            parse_config('/nonexistent/config.yaml')

    def test_malformed_file(self):
        path = self._write("benchmark: [branin2\n", '.yaml')
        try:
            with pytest.raises(ConfigError, match="malformed"):
                parse_config(path)
        finally:
            os.unlink(path)
