import math
import pathlib

import pytest
from hypothesis import given, strategies as st

from buckbench.config import Config, ConfigError, SimSettings, dump_config, load_config, parse_config
from buckbench.model import ControlConfig, ConverterParams, Scheme, Topology

CONFIGS = pathlib.Path(__file__).resolve().parents[1] / "configs"


def test_shipped_default_matches_dataclass_defaults():
    cfg = load_config(CONFIGS / "default.ini")
    assert cfg.params == ConverterParams()
    assert cfg.control == ControlConfig()
    assert cfg.sim == SimSettings()
    assert cfg.params.fs == 500e3


def test_ideal_config():
    cfg = load_config(CONFIGS / "ideal.ini")
    assert cfg.params.topology is Topology.ASYNCHRONOUS
    assert cfg.control.scheme is Scheme.OPEN_LOOP
    assert cfg.control.duty == 0.5


def test_empty_text_gives_defaults():
    cfg = parse_config("")
    assert cfg.params == ConverterParams()


def test_overrides():
    cfg = parse_config("[converter]\nR = 6\n", ["converter.R=inf", "control.scheme=burst",
                                                 "sim.steps_per_period=512"])
    assert math.isinf(cfg.params.R)
    assert cfg.control.scheme is Scheme.BURST
    assert cfg.sim.steps_per_period == 512


def test_vo_target_key():
    cfg = parse_config("[control]\nVo_target = 2.5\n")
    assert cfg.control.Vo_target == pytest.approx(2.5)


@pytest.mark.parametrize("text, overrides, message", [
    ("[converter]\nLx = 1\n", [], "unknown key"),
    ("[plant]\nL = 1\n", [], "unknown section"),
    ("", ["converter.bogus=1"], "unknown key"),
    ("", ["R=6"], "section.key=value"),
    ("[converter]\nL = 0\n", [], "L must be positive"),
    ("[converter]\nL = abc\n", [], "L"),
    ("[converter]\ntopology = buck\n", [], "topology"),
    ("[control]\nscheme = open_loop\n", [], "duty"),
    ("[sim]\nsweep = freq\n", [], "sweep"),
    ("[converter\n", [], "parse"),
])
def test_config_errors(text, overrides, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(text, overrides)


def test_missing_file():
    with pytest.raises(ConfigError, match="config not found"):
        load_config("/nonexistent/buck.ini")


reals = st.floats(1e-9, 1e3, allow_nan=False, allow_infinity=False)
small = st.floats(0, 10, allow_nan=False)


@given(Vi=reals, L=reals, C=reals, RL=small, RC=small, R=reals, Vd=small, hs=small,
       ls=small, fs=reals, Iq=small, sync=st.booleans(), soft=st.booleans())
def test_round_trip(Vi, L, C, RL, RC, R, Vd, hs, ls, fs, Iq, sync, soft):
    params = ConverterParams(Vi=Vi, L=L, C=C, RL=RL, RC=RC, R=R, Vd=Vd, RDSon_hs=hs,
                             RDSon_ls=ls, fs=fs, Iq=Iq, soft_switching=soft,
                             topology=Topology.SYNCHRONOUS if sync else Topology.ASYNCHRONOUS)
    control = ControlConfig(dead_time=0.0)
    original = Config(params, control, SimSettings())
    assert parse_config(dump_config(original)) == original


def test_round_trip_optional_fields():
    control = ControlConfig(scheme=Scheme.CURRENT_MODE, ipk_cmd=0.4, slope_comp=1.5e5)
    original = Config(ConverterParams(R=math.inf), control, SimSettings(t_end=1e-4))
    assert parse_config(dump_config(original)) == original
