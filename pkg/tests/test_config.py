import pytest

from dmtl.config import (
    ConfigError,
    GenConfig,
    ModelConfig,
    RunConfig,
    dumps_config,
    load_config,
    loads_config,
)


def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.ini"
    p.write_text("")
    cfg = load_config(p)
    assert cfg.gen == GenConfig(seed=cfg.run.seed)
    assert cfg.train.seed == cfg.run.seed


def test_fraction_out_of_range():
    with pytest.raises(ConfigError, match="clickbait_fraction"):
        loads_config("[gen]\nclickbait_fraction = 1.5\n")


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="train.learning_rate"):
        loads_config("[train]\nlearning_rate = 0.1\n")


def test_unknown_section():
    with pytest.raises(ConfigError):
        loads_config("[serving]\nk = 3\n")


def test_bad_value():
    with pytest.raises(ConfigError, match="gen.num_users"):
        loads_config("[gen]\nnum_users = many\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


def test_round_trip():
    cfg = loads_config("[run]\nseed = 3\n[train]\nlr = 0.01\nepochs = 2\n[model]\npreset = paper\n")
    assert cfg.model == ModelConfig.from_preset("paper")
    assert cfg.gen.seed == 3 and cfg.train.lr == 0.01
    assert loads_config(dumps_config(cfg)) == cfg


def test_threshold_propagates():
    cfg = loads_config("[gen]\nduration_threshold = 30\n")
    assert cfg.train.duration_threshold == 30.0
    with pytest.raises(ConfigError):
        loads_config("[gen]\nduration_threshold = 30\n[train]\nduration_threshold = 40\n")


def test_with_seed_moves_every_stage():
    cfg = RunConfig().with_seed(11)
    assert (cfg.run.seed, cfg.gen.seed, cfg.train.seed) == (11, 11, 11)


def test_seed_keys_hidden():
    assert "seed" not in dumps_config(RunConfig()).split("[gen]")[1].split("[")[0]
    with pytest.raises(ConfigError):
        loads_config("[gen]\nseed = 4\n")
