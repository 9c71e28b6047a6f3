import pytest
import yaml

from metadenoise.config import ExperimentConfig, config_from_dict, dump_config, load_config, require_paths
from metadenoise.errors import ConfigError


def test_defaults_round_trip_through_yaml(tmp_path):
    text = dump_config(ExperimentConfig())
    (tmp_path / "c.yaml").write_text(text)
    cfg = load_config(tmp_path / "c.yaml")
    default = ExperimentConfig()
    assert cfg.pretrain == default.pretrain and cfg.finetune == default.finetune
    assert cfg.network == default.network and cfg.adapt == default.adapt
    assert cfg.degradation == default.degradation


def test_published_hyperparameters():
    cfg = ExperimentConfig()
    assert (cfg.pretrain.alpha, cfg.pretrain.beta, cfg.pretrain.batch_size, cfg.pretrain.patch_size) == (1e-3, 1e-3, 16, 128)
    ft = cfg.finetune
    assert (ft.alpha, ft.beta, ft.K, ft.meta_batch_N, ft.lambda_in, ft.lambda_out) == (5e-5, 5e-5, 5, 2, 10.0, 10.0)
    assert cfg.pretrain.lambda_G == 0.01
    assert (cfg.adapt.K, cfg.adapt.alpha) == (5, 1e-5)
    assert cfg.degradation.gaussian_sigma_range == (5.0, 50.0)
    assert cfg.degradation.sp_amount_range == (0.0, 0.01)
    assert cfg.degradation.sp_salt_prob_range == (0.3, 0.8)


def test_partial_override_and_relative_paths(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({
        "pretrain": {"epochs": 3},
        "data": {"train_clean": "imgs"},
        "output_dir": "out",
    }))
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.pretrain.epochs == 3 and cfg.pretrain.alpha == 1e-3
    assert cfg.data.train_clean == str(tmp_path / "imgs")
    assert cfg.output_dir == str(tmp_path / "out")


def test_seed_environment_override(monkeypatch):
    monkeypatch.setenv("METADENOISE_SEED", "17")
    cfg = config_from_dict({})
    assert cfg.pretrain.seed == 17 and cfg.finetune.seed == 17
    monkeypatch.setenv("METADENOISE_SEED", "abc")
    with pytest.raises(ConfigError):
        config_from_dict({})


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"network": {"widths": 3}},
    {"network": {"depth": 0}},
    {"pretrain": {"alpha": -1}},
    {"degradation": {"sp_amount_range": [0.5, 0.1]}},
    {"network": [1, 2]},
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1, 2")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.yaml")


def test_require_paths(tmp_path):
    require_paths(("x", str(tmp_path)))
    with pytest.raises(ConfigError):
        require_paths(("x", None))
    with pytest.raises(ConfigError):
        require_paths(("x", str(tmp_path / "missing")))
