import pytest

from stochfv import config as cfgmod
from stochfv.config import PRESETS, ConfigError, RunConfig, load_config, parse_value


def test_parse_value():
    assert parse_value("3") == 3
    assert parse_value("[0.4, 0.25]") == [0.4, 0.25]
    assert parse_value("null") is None
    assert parse_value("(1, 2)") == (1, 2)
    assert parse_value("split") == "split"


def test_ini_round_trip_keeps_hash():
    cfg = RunConfig.from_preset("entropy")
    back = RunConfig.from_ini(cfg.to_ini())
    assert back.canonical() == cfg.canonical()
    assert back.hash == cfg.hash


def test_workers_excluded_from_hash():
    a = RunConfig.default()
    b = a.with_overrides(["ensemble.workers=8"])
    assert b.workers == 8 and a.hash == b.hash
    assert a.with_overrides(["ensemble.seed=1"]).hash != a.hash


def test_overrides_apply_before_hashing(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[scheme]\nT = 0.3\n")
    cfg = load_config(ini, overrides=["scheme.T=0.2", "noise.rate=2"])
    assert cfg["scheme"]["T"] == 0.2 and cfg["noise"]["rate"] == 2
    assert cfg.hash == RunConfig.default().with_overrides(["scheme.T=0.2", "noise.rate=2"]).hash


@pytest.mark.parametrize(
    "text",
    ["[scheme]\nTT = 1\n", "[nonsense]\na = 1\n", "not an ini"],
)
def test_unknown_or_malformed_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.from_ini(text)


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        RunConfig.default().with_overrides(["schemeT=1"])
    with pytest.raises(ConfigError):
        RunConfig.default().with_overrides(["scheme.bogus=1"])


def test_unknown_preset():
    with pytest.raises(ConfigError, match="available"):
        RunConfig.from_preset("nope")


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build(name):
    cfg = RunConfig.from_preset(name)
    problem, u0 = cfgmod.build_problem(cfg)
    assert problem.N >= 1 and problem.dt > 0
    assert problem.mesh.dimension == int(cfg["mesh"]["dimension"])
    cfgmod.build_entropy(cfg, problem.flux)
    assert cfgmod.resolutions(cfg)


def test_unknown_builder_names():
    for sec, key in [("flux", "name"), ("noise", "name"), ("initial", "name"), ("velocity", "name")]:
        cfg = RunConfig.default().with_overrides([f"{sec}.{key}=bogus"])
        with pytest.raises(ConfigError):
            cfgmod.build_problem(cfg)
