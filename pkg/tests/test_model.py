import math

import pytest
from hypothesis import given, strategies as st

from buckbench.model import (
    ControlConfig,
    ConverterParams,
    InvalidParameterError,
    Scheme,
    TimingSolution,
    Topology,
    validate,
    validate_control,
)


def test_default_params_accepted():
    p = ConverterParams()
    assert validate(p) is p
    assert (p.Vi, p.L, p.C) == (3.6, 10e-6, 22e-6)
    assert p.Ts == pytest.approx(2e-6)


def test_500khz_accepted():
    assert validate(ConverterParams(fs=500e3)).fs == 500e3


@pytest.mark.parametrize("name", ["Vi", "L", "C", "R", "fs"])
@pytest.mark.parametrize("value", [0.0, -1.0, math.nan])
def test_positive_fields_rejected(name, value):
    with pytest.raises(InvalidParameterError, match=f"{name} must be positive"):
        validate(ConverterParams(**{name: value}))


def test_zero_inductance_message():
    with pytest.raises(InvalidParameterError) as exc:
        validate(ConverterParams(L=0.0))
    assert str(exc.value) == "L must be positive"


@pytest.mark.parametrize("name", ["RL", "RC", "Vd", "RDSon_hs", "RDSon_ls", "Iq"])
def test_non_negative_fields(name):
    validate(ConverterParams(**{name: 0.0}))
    with pytest.raises(InvalidParameterError, match=f"{name} must be non-negative"):
        validate(ConverterParams(**{name: -1e-3}))


def test_open_circuit_load_allowed():
    validate(ConverterParams(R=math.inf))
    with pytest.raises(InvalidParameterError):
        validate(ConverterParams(L=math.inf))


def test_ideal_is_lossless_async():
    p = ConverterParams.ideal(R=6.0)
    assert p.topology is Topology.ASYNCHRONOUS
    assert p.RL == p.RC == p.Vd == p.RDSon_hs == p.Iq == 0.0
    assert p.R == 6.0


@given(st.floats(0, 1), st.floats(0, 1))
def test_timing_sums_to_one(D, frac):
    t = TimingSolution.from_fractions(D, (1 - D) * frac, 2e-6)
    assert abs(t.D + t.D2 + t.D3 - 1) <= 1e-12
    assert min(t.D, t.D2, t.D3) >= 0
    assert t.TON == pytest.approx(D * 2e-6)


def test_timing_rejects_bad_sum():
    with pytest.raises(ValueError):
        TimingSolution(0.5, 0.6, 0.0, 2e-6)
    with pytest.raises(ValueError):
        TimingSolution(-0.1, 1.1, 0.0, 2e-6)


def test_control_defaults():
    cfg = ControlConfig()
    assert cfg.Vref == 1.23
    assert cfg.Vo_target == pytest.approx(1.8)
    assert cfg.Vo_target * cfg.fb_ratio == pytest.approx(cfg.Vref)
    assert ControlConfig.for_target(2.5).Vo_target == pytest.approx(2.5)


@pytest.mark.parametrize("kwargs, message", [
    (dict(Vramp_pp=0.0), "Vramp_pp"),
    (dict(fb_ratio=1.5), "fb_ratio"),
    (dict(scheme=Scheme.BURST, burst_hyst=0.0), "burst_hyst"),
    (dict(dead_time=1e-6), "dead_time"),
    (dict(dead_time=-1e-9), "dead_time"),
    (dict(scheme=Scheme.OPEN_LOOP), "duty"),
    (dict(scheme=Scheme.OPEN_LOOP, duty=1.2), "duty"),
])
def test_control_validation(kwargs, message):
    with pytest.raises(InvalidParameterError, match=message):
        validate_control(ControlConfig(**kwargs), ConverterParams())
