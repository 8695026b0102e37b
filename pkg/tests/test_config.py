import json
import os

import pytest

from shared.config import ExperimentConfig, load_experiment_config, load_local_settings, parse_experiment_config
from shared.errors import ConfigError


class TestExperimentConfig:
    def test_defaults_are_valid(self):
        config = ExperimentConfig()
        assert config.seed == 0
        assert [s.name for s in config.scenarios] == ["los", "nlos"]
        assert config.codecs.constellations == ["QPSK", "16QAM", "64QAM"]

    def test_psr_outside_limits_rejected(self):
        with pytest.raises(ConfigError, match="PSR"):
            parse_experiment_config(json.dumps({"evaluation": {"psr_sweep": [-25.0]}}))

    def test_psr_override(self):
        config = parse_experiment_config(json.dumps({"allow_psr_override": True, "evaluation": {"psr_sweep": [-25.0, 0.0]}}))
        assert config.evaluation.psr_sweep == [-25.0, 0.0]

    @pytest.mark.parametrize(
        "payload",
        [
            {"seed": -1},
            {"codecs": {"constellations": ["8PSK"]}},
            {"codecs": {"modalities": ["smell"]}},
            {"scenarios": [{"name": "a"}, {"name": "a"}]},
            {"unknown_field": 1},
            {"pgm": {"mu": 0}},
        ],
    )
    def test_invalid_configs(self, payload):
        with pytest.raises(ConfigError):
            parse_experiment_config(json.dumps(payload))

    def test_malformed_json(self):
        with pytest.raises(ConfigError):
            parse_experiment_config("{not json")

    def test_hash_is_stable_and_sensitive(self):
        a = ExperimentConfig(seed=3)
        b = parse_experiment_config(a.canonical_json())
        assert a.config_hash == b.config_hash
        assert a.config_hash != ExperimentConfig(seed=4).config_hash
        assert len(a.config_hash) == 64

    def test_overrides(self, tmp_path):
        config = ExperimentConfig().with_overrides(seed=9, out_dir=tmp_path)
        assert config.seed == 9
        assert config.output_path == tmp_path


class TestLoading:
    def test_file_with_overrides(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({"seed": 2, "out_dir": "elsewhere"}))
        config = load_experiment_config(path, seed=5, out_dir=tmp_path / "out")
        assert config.seed == 5
        assert config.output_path == tmp_path / "out"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(tmp_path / "absent.json")

    def test_environment_defaults(self, monkeypatch, tmp_path):
        monkeypatch.setenv("EXPERIMENT_SEED", "11")
        monkeypatch.setenv("EXPERIMENT_OUT_DIR", str(tmp_path))
        config = load_experiment_config()
        assert config.seed == 11
        assert config.output_path == tmp_path

    def test_bad_environment_seed(self, monkeypatch):
        monkeypatch.setenv("EXPERIMENT_SEED", "eleven")
        with pytest.raises(ConfigError):
            load_experiment_config()

    def test_local_settings(self, tmp_path, monkeypatch):
        monkeypatch.delenv("LOG_LEVEL", raising=False)
        settings = tmp_path / "local.settings.json"
        settings.write_text(json.dumps({"Values": {"LOG_LEVEL": "DEBUG"}}))
        assert load_local_settings(settings) is True
        assert os.environ["LOG_LEVEL"] == "DEBUG"
        monkeypatch.delenv("LOG_LEVEL")

    def test_local_settings_absent(self, tmp_path):
        assert load_local_settings(tmp_path / "none.json") is False
