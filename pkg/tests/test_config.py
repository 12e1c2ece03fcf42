from __future__ import annotations

import pytest

from qroute.config import Config, apply_overrides, config_to_text, eval_number, load_config, parse_config_text
from qroute.env import ConfigError, UniformIntegers


def test_defaults_follow_the_reported_setup():
    cfg = Config()
    assert cfg.train.lr0 == 2.0**-11 and cfg.train.lr_freeze_epoch == 90
    assert (cfg.train.batches_per_epoch, cfg.train.batch_size) == (100, 128)
    assert cfg.env.n_nodes == 15 and cfg.policy.tanh_clip == 10.0
    assert cfg.train.baseline_mode == "sample"
    spec = cfg.env.generator_spec(0)
    assert spec.demand_kind == UniformIntegers(1, 23, 10.0)


def test_parse_and_round_trip():
    cfg = parse_config_text("[train]\nlr0 = 2**-8\nseed = 7\n[policy]\nhead_type = classical\n")
    assert cfg.train.lr0 == 2.0**-8 and cfg.train.seed == 7 and cfg.policy.head_type == "classical"
    assert parse_config_text(config_to_text(cfg)) == cfg


def test_overrides_win_and_are_typed(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[train]\nseed = 1\n")
    cfg = load_config(path, ["train.seed=5", "policy.dropout=0", "train.log_batches=yes"])
    assert cfg.train.seed == 5 and cfg.policy.dropout == 0.0 and cfg.train.log_batches is True
    assert apply_overrides(cfg, ["env.n_nodes=8"]).env.n_nodes == 8
    assert load_config(None) == Config()


@pytest.mark.parametrize(
    "text,needles",
    [
        ("[train]\nbogus = 1\n", ["train.bogus"]),
        ("[nope]\nx = 1\n", ["[nope]"]),
        ("[train]\nseed = abc\n", ["train.seed"]),
        ("[train]\nbatch_size = 0\nnum_epochs = 0\n", ["batch_size", "num_epochs"]),
        ("[policy]\nhead_type = hybrid\ndropout = 1.5\n", ["head_type", "dropout"]),
        ("[train]\nlr_decay = 0\n", ["lr_decay"]),
        ("[train\n", ["syntax"]),
    ],
)
def test_invalid_configs_name_every_problem(text, needles):
    with pytest.raises(ConfigError) as err:
        parse_config_text(text)
    for needle in needles:
        assert needle in str(err.value)


def test_malformed_override():
    with pytest.raises(ConfigError, match="section.key=value"):
        parse_config_text("", ["seed=3"])


def test_eval_number():
    assert eval_number("2**-11") == eval_number("2^-11") == 2.0**-11
    assert eval_number("1e-3") == 1e-3
    with pytest.raises(ValueError):
        eval_number("two")
