import pytest

from tokensplat.config import (ConfigError, RunConfig, config_reference,
                               load_run_config, parse_config_text, parse_value)


def test_defaults_present():
    cfg = RunConfig()
    assert cfg["train.lr_max"] == 4e-4
    assert cfg["train.weight_decay"] == 0.05
    assert cfg["train.lambda_ssim"] == 0.2
    assert cfg["train.lambda_vis"] == 1.0
    assert cfg["train.vis_clip"] == 1.0
    assert cfg["tune.steps"] == 50
    assert cfg["tune.lr"] == 1e-4
    assert cfg["precision"] == 64


def test_unknown_key_hard_error():
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig({"train.lr": 1.0})
    with pytest.raises(ConfigError, match="unknown"):
        parse_value("nonsense.key", "3")


def test_parse_config_text():
    values = parse_config_text(
        "# comment\n"
        "train.lr_max = 1e-3  # inline comment\n"
        "scene.timestamps = 0,0.5,1\n"
        "network.n_dynamic = 8\n"
        "\n")
    assert values == {"train.lr_max": 1e-3, "scene.timestamps": (0.0, 0.5, 1.0),
                      "network.n_dynamic": 8}


def test_parse_bad_syntax():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("not a key value pair")


def test_parse_bad_value():
    with pytest.raises(ConfigError, match="bad value"):
        parse_value("train.total_steps", "lots")
    with pytest.raises(ConfigError):
        parse_value("tune.target", "everything")
    with pytest.raises(ConfigError):
        parse_value("scene.ground_plane", "maybe")


def test_overrides_beat_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("train.lr_max = 1e-3\nscene.seed = 5\n")
    cfg = load_run_config(p, ["train.lr_max=2e-3"])
    assert cfg["train.lr_max"] == 2e-3
    assert cfg["scene.seed"] == 5


def test_typed_views_consistent():
    cfg = load_run_config(None, ["network.n_dynamic=4", "scene.image_size=16",
                                 "render.background=0.1,0.2,0.3"])
    assert cfg.network_config().n_dynamic == 4
    assert cfg.scene_spec().image_size == (16, 16)
    assert cfg.render_config().background == (0.1, 0.2, 0.3)
    assert cfg.train_config().lr_max == 4e-4
    assert cfg.tune_config().target == "tokens"


def test_config_reference_covers_all_keys():
    text = config_reference()
    cfg = RunConfig()
    for key in cfg.values:
        assert key in text
