import pytest
import yaml

from sotaseg import config as config_mod
from sotaseg.config import ConfigError, RunConfig, from_dict, paper_scale
from sotaseg.prompt import MorphologyConfig


def test_defaults_are_valid_and_derive_library_configs():
    cfg = RunConfig()
    m = cfg.model_config()
    assert m.feature_dim == cfg.model.feature_dim and m.morphology == cfg.morphology
    t = cfg.with_seed(7).train_config()
    assert t.seed == 7 and t.lora == cfg.lora
    assert cfg.with_seed(7).synth_config().seed == 7
    assert cfg.with_seed(7).base_config().seed == 7


def test_yaml_round_trip():
    cfg = from_dict({"seed": 4, "morphology": {"kernel_size": 5}, "lora": {"targets": ["CA"]}})
    again = from_dict(yaml.safe_load(cfg.to_yaml()))
    assert again == cfg
    assert again.to_yaml() == cfg.to_yaml()


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"synth": {"colour": "red"}},
    {"train": {"seed": 3}},  # owned by the top-level seed
    {"synth": "not a mapping"},
    {"merge_mode": "sum"},
    {"normalization": "relu"},
    {"synth": {"image_size": [60, 60]}},
    {"morphology": {"kernel_size": 4}},
])
def test_invalid_documents_rejected(doc):
    with pytest.raises(ConfigError):
        from_dict(doc)


def test_paper_scale_preset():
    cfg = paper_scale()
    assert cfg.synth.image_size == (256, 256)
    assert cfg.model.feature_dim == 256
    assert cfg.morphology == MorphologyConfig(15, 15, "dilate_only")
    assert cfg.train.lr0 == 1e-4


def test_load_overlays_file_on_preset(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 2\ntrain:\n  max_iter: 10\n")
    cfg = config_mod.load(path, paper=True, seed=9)
    assert cfg.seed == 9 and cfg.train.max_iter == 10 and cfg.synth.image_size == (256, 256)
    with pytest.raises(FileNotFoundError):
        config_mod.load(tmp_path / "missing.yaml")
    path.write_text("seed: [1, 2\n")
    with pytest.raises(ConfigError):
        config_mod.load(path)


def test_echo_reproduces_config(tmp_path):
    cfg = from_dict({"seed": 11, "merge_mode": "max"})
    written = config_mod.echo(cfg, tmp_path)
    assert written.name == "config.resolved.yaml"
    assert config_mod.load(written) == cfg
