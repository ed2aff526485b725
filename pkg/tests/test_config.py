import pytest
import yaml

from canopysr.config import TEMPLATE, RunConfig, load_config, parse_override, set_dotted
from canopysr.errors import ConfigError


def test_defaults_follow_resolution():
    cfg = RunConfig.from_dict({})
    assert cfg.resolution == 2.5 and cfg.factor == 4 and cfg.model.n_blocks == 5
    ten = RunConfig.from_dict({"resolution": 10})
    assert ten.factor == 1 and ten.model.n_blocks == 4 and ten.model.layers_per_block == 4
    assert ten.synth.target_resolution == 10.0
    assert RunConfig.from_dict({"resolution": 5}).factor == 2


def test_model_keys_override_preset():
    cfg = RunConfig.from_dict({"resolution": 10, "model": {"growth": 8, "n_blocks": 2}})
    assert (cfg.model.growth, cfg.model.n_blocks, cfg.model.layers_per_block) == (8, 2, 4)


def test_seed_propagates_unless_set():
    cfg = RunConfig.from_dict({"seed": 7})
    assert cfg.train.seed == 7 and cfg.synth.seed == 7
    cfg = RunConfig.from_dict({"seed": 7, "train": {"seed": 3}})
    assert cfg.train.seed == 3 and cfg.synth.seed == 7


@pytest.mark.parametrize("bad, key", [
    ({"modle": {}}, "modle"),
    ({"model": {"depth": 3}}, "model.depth"),
    ({"train": {"momentum": 0.9}}, "train.momentum"),
    ({"sampler": {"windw": 3}}, "sampler.windw"),
])
def test_unknown_keys_named(bad, key):
    with pytest.raises(ConfigError, match=key):
        RunConfig.from_dict(bad)


def test_invalid_values():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"resolution": 3})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"loss": {"lambda_min": 2.0}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": 5})
    with pytest.raises(ConfigError, match="train.lr"):
        RunConfig.from_dict({"train": {"lr": "fast"}})


def test_numeric_strings_coerced():
    # YAML 1.1 leaves 1e-3 (no dot) as a string
    cfg = RunConfig.from_dict(yaml.safe_load("train:\n  lr: 1e-3\n  max_steps: '20'\nmodel:\n  tau: 365\n"))
    assert cfg.train.lr == 1e-3 and isinstance(cfg.train.lr, float)
    assert cfg.train.max_steps == 20 and cfg.model.tau == 365.0


def test_echo_round_trip(tmp_path):
    cfg = RunConfig.from_dict({"resolution": 5, "seed": 2, "model": {"growth": 12},
                               "train": {"lr": 5e-4, "betas": [0.8, 0.99]}})
    path = cfg.write(tmp_path / "config.yaml")
    again = load_config(path)
    assert again == cfg
    assert again.dump() == cfg.dump()


def test_template_is_valid_and_matches_defaults(tmp_path):
    path = tmp_path / "t.yaml"
    path.write_text(TEMPLATE)
    assert isinstance(yaml.safe_load(TEMPLATE), dict)
    assert load_config(path) == RunConfig.from_dict({})


def test_overrides(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("resolution: 10\ntrain:\n  lr: 0.01\n")
    cfg = load_config(path, dict([parse_override("train.lr=2e-4"), parse_override("sampler.window=32")]))
    assert cfg.train.lr == 2e-4 and cfg.sampler.window == 32 and cfg.resolution == 10.0
    assert parse_override("model.mlp_layers=[8, 16, 8]") == ("model.mlp_layers", [8, 16, 8])
    with pytest.raises(ConfigError):
        parse_override("train.lr")
    d = {"train": 3}
    with pytest.raises(ConfigError):
        set_dotted(d, "train.lr", 1)


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(bad)
