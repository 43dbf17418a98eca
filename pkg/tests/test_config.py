import textwrap

import pytest

from nudiff.config import ConfigError, env_overrides, load_config

BASE = """\
experiment: uniform
seed: 3
dataset:
  kind: gaussian
  mean: [0.0]
  cov: [[1.0]]
train:
  lr: 1e-3
  iterations: 10
"""


@pytest.fixture
def cfg_file(tmp_path):
    def write(text):
        path = tmp_path / "c.yaml"
        path.write_text(textwrap.dedent(text))
        return path
    return write


class TestLoad:
    def test_defaults_filled(self, cfg_file):
        cfg = load_config(cfg_file(BASE), environ={})
        assert cfg.seed == 3 and cfg.threads == 1
        assert cfg.train["lr"] == 1e-3  # YAML reads 1e-3 as a string; converted
        assert cfg.sde["family"] == "vp_linear"
        assert cfg.sampler["n_steps"] == 256

    def test_digest_tracks_content(self, cfg_file):
        a = load_config(cfg_file(BASE), environ={})
        b = load_config(cfg_file(BASE), environ={})
        c = load_config(cfg_file(BASE), environ={}, overrides={"seed": 4})
        assert a.digest == b.digest != c.digest

    def test_unknown_key_reports_line(self, cfg_file):
        path = cfg_file(BASE + "  warmup: 5\n")
        with pytest.raises(ConfigError, match=r"c.yaml:10: train.warmup: unknown key"):
            load_config(path, environ={})

    def test_bad_value_reports_line(self, cfg_file):
        path = cfg_file(BASE.replace("iterations: 10", "iterations: ten"))
        with pytest.raises(ConfigError, match=r"c.yaml:9: train.iterations"):
            load_config(path, environ={})

    def test_missing_required(self, cfg_file):
        with pytest.raises(ConfigError, match="experiment: required key missing"):
            load_config(cfg_file("dataset: {kind: gaussian}\n"), environ={})

    def test_cross_checks(self, cfg_file):
        with pytest.raises(ConfigError, match="multiscale experiments need image data"):
            load_config(cfg_file(BASE.replace("uniform", "multiscale")), environ={})
        text = "experiment: conditional\ndataset: {kind: toy_images}\n"
        with pytest.raises(ConfigError, match="forward operator"):
            load_config(cfg_file(text), environ={})

    def test_invalid_yaml(self, cfg_file):
        with pytest.raises(ConfigError, match="invalid YAML"):
            load_config(cfg_file("experiment: [uniform\n"), environ={})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read config"):
            load_config(tmp_path / "nope.yaml")


class TestOverrides:
    def test_env_then_flags(self, cfg_file):
        path = cfg_file(BASE)
        env = {"NUDIFF_TRAIN__ITERATIONS": "20", "NUDIFF_SEED": "9", "OTHER": "1"}
        cfg = load_config(path, environ=env)
        assert cfg.train["iterations"] == 20 and cfg.seed == 9
        cfg = load_config(path, environ=env, overrides={"seed": 11, "out": None})
        assert cfg.seed == 11

    def test_env_error_names_variable(self, cfg_file):
        with pytest.raises(ConfigError, match="environment NUDIFF_TRAIN__LR"):
            load_config(cfg_file(BASE), environ={"NUDIFF_TRAIN__LR": "fast"})

    def test_env_parsing(self):
        got = env_overrides({"NUDIFF_MODEL__HIDDEN": "[8, 8]", "NUDIFF_A__B__C": "1"})
        assert got == [(("model", "hidden"), [8, 8], "NUDIFF_MODEL__HIDDEN")]
