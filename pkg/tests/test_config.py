import pytest

from diffquant.config import load_config, parse_config, shipped_config
from diffquant.errors import ConfigError, ScheduleTooCoarse

from helpers import config, data, to_toml

SHIPPED = ["lq", "lq_finite", "ou_ergodic", "brownian_exit", "controlled_exit", "lq2d"]


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_load(name):
    cfg = load_config(shipped_config(name))
    assert cfg.criterion in ("discounted", "finite_horizon", "ergodic", "exit")
    assert cfg.schedule.n or cfg.schedule.dt
    assert shipped_config(name + ".toml") == shipped_config(name)


def test_defaults_and_round_trip_through_toml(tmp_path):
    cfg = config()
    assert cfg.grid.counts == (121,) and cfg.x0 == (0.0,)
    assert cfg.schedule.state_cells == (6,)
    assert cfg.policy["kind"] == "optimal" and cfg.out_format == "csv"
    p = tmp_path / "c.toml"
    p.write_text(to_toml(data()))
    again = load_config(p)
    assert again.schedule == cfg.schedule and again.mc == cfg.mc
    assert len(again.test_bank()) == 6


def test_discounted_t_max_default():
    cfg = config(mc={"t_max": None}, model={"alpha": 0.5})
    assert cfg.mc.t_max == 28


@pytest.mark.parametrize("patch, field", [
    ({"model": {"cost": None}}, "model.cost"),
    ({"model": {"colour": 1}}, "model.colour"),
    ({"criterion": {"kind": "bogus"}}, "criterion.kind"),
    ({"grid": {"h": -1.0}}, "grid.h"),
    ({"mc": {"n_paths": 0}}, "mc.n_paths"),
    ({"model": {"drift": ["-x1 + "]}}, "model.drift"),
    ({"model": {"cost": "x2"}}, "model.cost"),
    ({"model": {"alpha": None}}, "model.alpha"),
    ({"schedule": {"n": [4, 2]}}, "schedule.n"),
    ({"schedule": {"m": [2, 2]}}, "schedule.m"),
    ({"criterion": {"x0": [0.0, 1.0]}}, "criterion.x0"),
    ({"policy": {"kind": "feedback", "control": ["x9"]}}, None),
    ({"policy": {"kind": "file"}}, "policy.path"),
    ({"bank": [{"name": "b", "f": "x1 +", "g": "u1"}]}, "bank.0"),
])
def test_config_errors_name_the_field(patch, field):
    with pytest.raises(ConfigError) as info:
        config(**patch)
    if field is not None:
        assert info.value.field.startswith(field)


@pytest.mark.parametrize("sched", [{"reference_n": 4}, {"reference_n": 10}])
def test_schedule_too_coarse(sched):
    with pytest.raises(ScheduleTooCoarse) as info:
        config(schedule=sched)
    assert info.value.field == "schedule.reference_n"


def test_time_schedule_rules():
    fin = dict(model={"alpha": None, "horizon": 1.0, "terminal": "0"},
               criterion={"kind": "finite_horizon"})
    ok = config(**fin, schedule={"dt": [0.05, 0.1], "reference_dt": 0.025})
    assert ok.schedule.dt == (0.05, 0.1)
    with pytest.raises(ScheduleTooCoarse):
        config(**fin, schedule={"dt": [0.05, 0.1], "reference_dt": 0.03})
    with pytest.raises(ScheduleTooCoarse):
        config(**fin, schedule={"dt": [0.025, 0.1], "reference_dt": 0.025})
    with pytest.raises(ConfigError):
        config(**fin, schedule={"dt": [0.1, 0.05], "reference_dt": 0.025})
    with pytest.raises(ConfigError) as info:
        config(criterion={"kind": "finite_horizon"})
    assert info.value.field == "model.horizon"


def test_exit_rules():
    ex = dict(model={"exit": {"low": [-1.0], "high": [1.0], "payoff": "0"}},
              criterion={"kind": "exit", "x0": None}, grid={"low": None, "high": None, "h": 0.01})
    cfg = config(**ex)
    assert cfg.x0 == (0.0,) and cfg.grid.low == (-1.0,)
    with pytest.raises(ConfigError) as info:
        config(**{**ex, "criterion": {"kind": "exit", "x0": [1.0]}})
    assert info.value.field == "criterion.x0"
    with pytest.raises(ConfigError) as info:
        config(**{**ex, "grid": {"low": [-2.0], "high": [1.0], "h": 0.01}})
    assert info.value.field == "grid"


def test_dimension_cap():
    three = dict(model={"dim_x": 3, "drift": ["0", "0", "0"],
                        "sigma": [["1", "0", "0"], ["0", "1", "0"], ["0", "0", "1"]]},
                 grid={"low": [0.0] * 3, "high": [1.0] * 3, "h": 0.5},
                 criterion={"x0": [0.0] * 3})
    with pytest.raises(ConfigError) as info:
        config(**three)
    assert info.value.field == "grid"


def test_overrides():
    cfg = config().with_overrides(seed=99, threads=3, out_dir="o", out_format="json")
    assert cfg.mc.seed == 99 and cfg.threads == 3 and cfg.sim_config().threads == 3
    assert (cfg.out_dir, cfg.out_format) == ("o", "json")
    with pytest.raises(ConfigError) as info:
        config().with_overrides(criterion="bogus")
    assert info.value.field == "criterion.kind"
    with pytest.raises(ConfigError):
        config().with_overrides(criterion="exit")


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\n")
    with pytest.raises(ConfigError) as info:
        load_config(bad)
    assert info.value.field == "config"
    with pytest.raises(ConfigError):
        shipped_config("nope")
    with pytest.raises(ConfigError):
        parse_config({"model": {}})
