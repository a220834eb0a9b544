import pytest

from memo_edge.config import SCHEMA, ConfigError, RunConfig, default_config_text, load_config, parse_config


def test_defaults():
    cfg = RunConfig()
    assert cfg.model_config().channels == (16, 32, 64, 128)
    t = cfg.training_config()
    assert t.batch_size == 16 and t.learning_rate == 5e-5
    assert cfg.training_config(finetune=True).learning_rate == 2e-5
    i = cfg.inference_config(seed=4)
    assert (i.steps, i.strategy, i.scale, i.seed) == (10, "locmax", 1.0, 4)
    s = cfg.scene_config(seed=9)
    assert (s.height, s.width, s.seed) == (64, 64, 9)


def test_default_text_parses_back_to_defaults():
    assert parse_config(default_config_text()).values == RunConfig().values


def test_every_key_documented():
    text = default_config_text()
    for section, keys in SCHEMA.items():
        assert f"[{section}]" in text
        for key in keys:
            assert f"\n{key} = " in text


def test_overrides_and_none():
    cfg = parse_config("[infer]\nsteps = none\nstrategy = topk\nfraction = 0.25\n[model]\nchannels = 8, 16\n[eval]\nscales = 1.2,1.5\n")
    assert cfg["infer"]["steps"] is None
    assert cfg.inference_config().strategy == "topk"
    assert cfg.model_config().channels == (8, 16)
    assert cfg["eval"]["scales"] == (1.2, 1.5)
    assert cfg["train"]["batch_size"] == 16


@pytest.mark.parametrize(
    "text, message",
    [
        ("[bogus]\nx = 1\n", "unknown section"),
        ("[train]\nbatchsize = 4\n", "unknown key"),
        ("[train]\nbatch_size = four\n", "bad value"),
        ("[train]\naugment = maybe\n", "bad value"),
        ("no section header\n", "config.ini"),
    ],
)
def test_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(text, "config.ini")


def test_invalid_values_surface_from_typed_configs():
    cfg = parse_config("[infer]\nstrategy = sideways\n")
    with pytest.raises(ValueError):
        cfg.inference_config()


def test_load_config(tmp_path):
    assert load_config(None).values == RunConfig().values
    path = tmp_path / "run.ini"
    path.write_text("[data]\nheight = 32\n", encoding="utf-8")
    assert load_config(path).scene_config().height == 32
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.ini")
