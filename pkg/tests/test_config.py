import pytest

from maskctc.config import ConfigError, build, dump, parse_text
from maskctc.decoding import DecodeConfig
from maskctc.training import TrainConfig


def test_parse_typed_values():
    vals = parse_text("epochs = 7  # short\nlr=0.01\n\narchitecture = transformer\n", TrainConfig)
    assert vals == {"epochs": 7, "lr": 0.01, "architecture": "transformer"}
    cfg = build(TrainConfig, vals)
    assert cfg.epochs == 7 and cfg.alpha == 0.3


def test_optional_and_bool_fields():
    vals = parse_text("p_thres = none\nrecompute_c = yes\nmax_loop = 4\n", DecodeConfig)
    assert vals == {"p_thres": None, "recompute_c": True, "max_loop": 4}


def test_overrides_win_and_none_is_ignored():
    cfg = build(TrainConfig, {"epochs": 7}, {"epochs": "3", "seed": None})
    assert cfg.epochs == 3 and cfg.seed == 0


@pytest.mark.parametrize(
    "text",
    ["epochs 7", "unknown = 1", "epochs = seven", "epochs = 1\nepochs = 2"],
)
def test_errors(text):
    with pytest.raises(ConfigError):
        parse_text(text, TrainConfig)


def test_invalid_value_surfaces_as_config_error():
    with pytest.raises(ConfigError):
        build(TrainConfig, {"architecture": "lstm"})
    with pytest.raises(ConfigError):
        build(DecodeConfig, {"K": 0})


def test_dump_round_trip():
    cfg = TrainConfig(epochs=3, architecture="transformer")
    assert build(TrainConfig, parse_text(dump(cfg), TrainConfig)) == cfg
