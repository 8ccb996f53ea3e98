import pytest

from gcpo.config import ConfigError, TrainConfig, dumps_config, load_config, loads_config


def test_defaults_round_trip():
    cfg = TrainConfig(algorithm="gcpo", seed=7, kappa=0.1, upsilon_floor=0.5)
    assert loads_config(dumps_config(cfg)) == cfg


def test_overrides_win():
    cfg = loads_config("[run]\nalgorithm = grpo\nseed = 3\n", algorithm="gcpo", seed=None)
    assert cfg.algorithm == "gcpo" and cfg.seed == 3


def test_comments_and_types():
    cfg = loads_config("# top\n[optim]\nlr = 1e-3   # inline\n[gcpo]\naux_greedy = yes\nupsilon_floor = none\n")
    assert cfg.lr == 1e-3 and cfg.aux_greedy is True and cfg.upsilon_floor is None


def test_unknown_key_names_line():
    with pytest.raises(ConfigError, match=r":3: unknown key 'lrr'"):
        loads_config("[optim]\nlr = 1e-3\nlrr = 2\n")


def test_misplaced_key_hint():
    with pytest.raises(ConfigError, match=r"belongs in \[gcpo\]"):
        loads_config("[run]\nkappa = 0.1\n")


def test_bad_value_names_line():
    with pytest.raises(ConfigError, match=r":2: bad value for n"):
        loads_config("[run]\nn = four\n")


def test_unknown_section():
    with pytest.raises(ConfigError, match="unknown section"):
        loads_config("[nope]\nx = 1\n")


@pytest.mark.parametrize("kw", [dict(n=1), dict(eps=1.5), dict(algorithm="ppo"), dict(metric="l1"),
                                dict(phi_sum_mode="max"), dict(lr=0.0), dict(k=0), dict(beta=-1.0)])
def test_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "absent.cfg")


def test_string_overrides_are_coerced():
    cfg = loads_config("[run]\nsteps = 5\n", lr="1e-3", batch_queries="16", aux_greedy="yes")
    assert cfg.lr == 1e-3 and cfg.batch_queries == 16 and cfg.aux_greedy is True
    with pytest.raises(ConfigError):
        loads_config("", nonsense="1")
    with pytest.raises(ConfigError):
        loads_config("", steps="many")
