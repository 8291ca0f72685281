import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from buckbench import analysis
from buckbench.dynamics import Phase
from buckbench.engine import (
    Simulator,
    load_step,
    make_simulator,
    measure,
    measure_efficiency,
    rk4_affine_map,
    run_to_steady_state,
    simulate,
    sweep,
    write_metrics_csv,
    write_trace_csv,
)
from buckbench.model import (
    ControlConfig,
    ConvergenceError,
    ConverterParams,
    InvalidParameterError,
    Mode,
    PlantState,
    Scheme,
    SimulationDivergence,
    Topology,
)

Ts = 2e-6
IDEAL6 = ConverterParams.ideal(R=6.0)


def params_for_k(K, **kw):
    return ConverterParams.ideal(R=2 * 10e-6 / (K * Ts), **kw)


def per_cycle(trace, fn):
    out = []
    for c in trace.cycles:
        sel = (trace.t >= c.t0) & (trace.t <= c.t0 + Ts)
        out.append(fn(trace.iL[sel]))
    return np.array(out)


# stepping kernel


def test_rk4_map_matches_rk4_step():
    A = np.array([[-10.0, -1e5], [4.5e4, -7.5e3]])
    b = np.array([3.6e5, 0.0])
    h = 1e-8
    x = np.array([0.2, 1.7])

    def f(y):
        return A @ y + b

    k1 = f(x)
    k2 = f(x + h / 2 * k1)
    k3 = f(x + h / 2 * k2)
    k4 = f(x + h * k3)
    ref = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    got = rk4_affine_map(A, b, h) @ np.append(x, 1.0)
    np.testing.assert_allclose(got, ref, rtol=1e-14)


# simulate


def test_sawtooth_ripple_from_average_current():
    trace = simulate(IDEAL6, ControlConfig.open_loop(0.5), 40 * Ts,
                     PlantState(iL=0.3, vC=1.8))
    ripple = per_cycle(trace, np.ptp)
    # the start is off the periodic orbit, so the LC filter rings slightly
    np.testing.assert_allclose(ripple, 0.18, rtol=0.05)


def test_sawtooth_ripple_from_valley():
    trace = simulate(IDEAL6, ControlConfig.open_loop(0.5), 40 * Ts,
                     PlantState(iL=0.3 - 0.09, vC=1.8))
    np.testing.assert_allclose(per_cycle(trace, np.ptp), 0.18, rtol=1e-2)
    rising = trace.phase[:-1] == Phase.HIGH
    slope = np.diff(trace.iL) / np.diff(trace.t)
    np.testing.assert_allclose(slope[rising], 1.8e5, rtol=2e-2)


def test_zero_duty_stays_at_rest():
    trace = simulate(IDEAL6, ControlConfig.open_loop(0.0), 20 * Ts, PlantState())
    assert np.all(trace.iL == 0.0)
    assert np.all(trace.vC == 0.0)
    assert np.all(trace.vo == 0.0)


def test_dcm_cycles_reach_zero():
    p = params_for_k(0.1)
    vo = analysis.vo_dcm(p, 0.2)
    trace = simulate(p, ControlConfig.open_loop(0.2), 30 * Ts, PlantState(iL=0.0, vC=vo))
    for c in trace.cycles:
        sel = (trace.t >= c.t0) & (trace.t < c.t0 + Ts)
        assert np.any(trace.phase[sel] == Phase.IDLE)
    assert np.all(trace.iL[trace.phase == Phase.IDLE] == 0.0)


def test_trace_invariants():
    trace, _ = run_to_steady_state(ConverterParams(R=1.8 / 0.01), ControlConfig())
    assert np.all(np.diff(trace.t) > 0)
    assert set(trace.cond) <= {"On", "Off", "Idle"}
    assert len(trace.vo) == len(trace.duty) == len(trace.t)


def test_t_end_too_small():
    with pytest.raises(InvalidParameterError, match="t_end too small"):
        simulate(IDEAL6, ControlConfig.open_loop(0.5), 0.5 * Ts)


def test_divergence_reported_with_time():
    p = ConverterParams.ideal(L=1e-300, C=1e-300, R=6.0)
    with pytest.raises(SimulationDivergence) as exc:
        simulate(p, ControlConfig.open_loop(0.5), 4 * Ts, PlantState(vC=1.0))
    assert math.isfinite(exc.value.t)


@settings(max_examples=15, deadline=None)
@given(D=st.floats(0.05, 0.95), R=st.floats(2.0, 500.0), Vd=st.floats(0, 0.5),
       RL=st.floats(0, 0.1), RC=st.floats(0, 0.05))
def test_asynchronous_current_never_negative(D, R, Vd, RL, RC):
    p = ConverterParams(topology=Topology.ASYNCHRONOUS, R=R, Vd=Vd, RL=RL, RC=RC)
    trace = simulate(p, ControlConfig.open_loop(D), 30 * Ts, PlantState())
    assert trace.iL.min() >= -1e-12


# steady state


def test_steady_state_ideal_ccm():
    _, m = run_to_steady_state(IDEAL6, ControlConfig.open_loop(0.5))
    assert m.Vo_avg == pytest.approx(1.8, rel=1e-2)
    assert m.iL_ripple_pp == pytest.approx(0.18, rel=1e-2)
    assert m.mode is Mode.CCM


def test_steady_state_dcm():
    _, m = run_to_steady_state(params_for_k(0.1), ControlConfig.open_loop(0.2))
    assert m.Vo_avg == pytest.approx(1.668, rel=2e-2)
    assert m.mode is Mode.DCM
    assert m.D2 == pytest.approx(0.2317, abs=3e-2)


def test_periodicity():
    p = ConverterParams(topology=Topology.ASYNCHRONOUS, R=20.0)
    cfg = ControlConfig.open_loop(0.45)
    trace, m = run_to_steady_state(p, cfg)
    t1 = trace.t[-1]
    again = simulate(p, cfg, t1 + Ts, PlantState(iL=trace.iL[-1], vC=trace.vC[-1], t=t1))
    assert measure(again, p).Vo_avg == pytest.approx(m.Vo_avg, rel=1e-5)


@pytest.mark.parametrize("K", [0.05, 0.2, 0.6, 1.5])
@pytest.mark.parametrize("D", [0.15, 0.35, 0.6, 0.85])
def test_mode_agreement(K, D):
    if abs(K - (1 - D)) <= 0.05:
        pytest.skip("too close to the boundary")
    p = params_for_k(K)
    _, m = run_to_steady_state(p, ControlConfig.open_loop(D))
    assert m.mode is analysis.conduction_mode(p, D)


def test_step_halving():
    cfg = ControlConfig.open_loop(0.37)
    p = ConverterParams(topology=Topology.ASYNCHRONOUS, R=5.0)
    a = run_to_steady_state(p, cfg, steps_per_period=256)[1].Vo_avg
    b = run_to_steady_state(p, cfg, steps_per_period=512)[1].Vo_avg
    assert abs(a - b) / a < 1e-6


def test_convergence_cap_reports_residual():
    cfg = ControlConfig.for_target(2.52, scheme=Scheme.CURRENT_MODE, ipk_cmd=0.4956,
                                   slope_comp=0.0)
    with pytest.raises(ConvergenceError) as exc:
        run_to_steady_state(IDEAL6, cfg, max_periods=300)
    assert exc.value.residual > 1e-6


@pytest.mark.parametrize("scheme", [Scheme.VOLTAGE_MODE, Scheme.CURRENT_MODE, Scheme.BURST])
@pytest.mark.parametrize("Io", [0.0, 0.001, 0.05, 0.3])
def test_closed_loop_regulates(scheme, Io):
    p = ConverterParams(R=math.inf if Io == 0 else 1.8 / Io)
    _, m = run_to_steady_state(p, ControlConfig(scheme=scheme))
    if scheme is Scheme.BURST and Io == 0:
        assert m.mode is Mode.BURST
        return
    assert m.Vo_avg == pytest.approx(1.8, rel=1e-2)
    if math.isfinite(p.R):
        assert m.energy_residual < 5e-3


def test_burst_light_load_band():
    cfg = ControlConfig(scheme=Scheme.BURST)
    trace, m = run_to_steady_state(ConverterParams(R=1.8 / 1e-3), cfg)
    assert m.mode is Mode.BURST
    assert m.n_skipped > 0
    v = trace.vo * cfg.fb_ratio
    # single-cycle excursion of the feedback voltage
    excursion = max(np.ptp(v[(trace.t >= c.t0) & (trace.t <= c.t0 + Ts)])
                    for c in trace.cycles)
    assert v.min() >= cfg.Vref - cfg.burst_hyst - excursion
    assert v.max() <= cfg.Vref + cfg.burst_hyst + excursion


@pytest.mark.parametrize("D", [0.3, 0.6, 0.75, 0.9])
def test_current_mode_period_one(D):
    Vo = 3.6 * D
    Io = Vo / 6.0
    mc = Vo / 10e-6
    ipk = Io + 0.5 * (3.6 - Vo) * D * Ts / 10e-6 + mc * D * Ts
    cfg = ControlConfig.for_target(Vo, Vref=0.6, scheme=Scheme.CURRENT_MODE, ipk_cmd=ipk)
    sim = make_simulator(IDEAL6, cfg)
    peaks = np.array([sim.cycle().ipk for _ in range(1500)])[-40:]
    assert np.ptp(peaks) / peaks.mean() < 1e-4
    assert sim.cycle().duty == pytest.approx(D, rel=1e-3)


# efficiency


def test_lossless_efficiency():
    trace, m = run_to_steady_state(IDEAL6, ControlConfig.open_loop(0.5))
    assert measure_efficiency(trace, IDEAL6) == pytest.approx(1.0, abs=1e-3)
    assert m.efficiency == pytest.approx(1.0, abs=1e-3)


def test_quiescent_dominated_light_load():
    # Pout = 1 µW at 1.8 V; invert the DCM conversion ratio for the duty
    p = ConverterParams.ideal(Iq=35e-6, R=1.8 ** 2 / 1e-6)
    D = math.sqrt(4 * analysis.k_param(p) / ((2 * 3.6 / 1.8 - 1) ** 2 - 1))
    trace, m = run_to_steady_state(p, ControlConfig.open_loop(D))
    assert m.Pout == pytest.approx(1e-6, rel=2e-2)
    assert m.P_quiescent == pytest.approx(126e-6, rel=1e-9)
    assert measure_efficiency(trace, p) < 0.01


def test_default_efficiency_at_300ma():
    _, m = run_to_steady_state(ConverterParams(R=6.0), ControlConfig())
    assert m.efficiency > 0.90


def test_switching_loss_terms():
    p = ConverterParams(R=6.0)
    _, m = run_to_steady_state(p, ControlConfig())
    expected = p.fs * (0.5 * p.Vi * m.Ipk * (p.tr + p.tf) + p.Qg * p.Vg)
    assert m.P_switching == pytest.approx(expected, rel=1e-3)
    _, soft = run_to_steady_state(ConverterParams(R=6.0, soft_switching=True), ControlConfig())
    assert soft.P_switching == pytest.approx(p.fs * p.Qg * p.Vg, rel=1e-9)
    assert soft.efficiency > m.efficiency


@pytest.mark.parametrize("topology", list(Topology))
@pytest.mark.parametrize("R", [3.0, 30.0, 600.0])
def test_energy_audit(topology, R):
    p = ConverterParams(topology=topology, R=R)
    _, m = run_to_steady_state(p, ControlConfig(scheme=Scheme.CURRENT_MODE))
    assert m.energy_residual < 5e-3
    assert m.volt_second < 1e-3
    assert m.charge_balance < 1e-3
    assert 0 <= m.efficiency <= 1


def test_burst_beats_pwm_at_light_load():
    p = ConverterParams(R=1.8 / 2e-3)
    _, burst = run_to_steady_state(p, ControlConfig(scheme=Scheme.BURST))
    _, pwm = run_to_steady_state(p, ControlConfig())
    assert burst.efficiency > pwm.efficiency


# load step


def test_load_step_no_change():
    _, m = load_step(ConverterParams(), ControlConfig(), 0.1, 0.1, 2e-6)
    assert m.settle_time == 0.0
    assert math.isnan(m.load_regulation)


def test_load_step_closed_loop():
    cfg = ControlConfig()
    trace, m = load_step(ConverterParams(), cfg, 0.0, 0.3, 2e-6)
    assert math.isfinite(m.settle_time) and m.settle_time > 0
    assert trace.vo.min() < 0.99 * cfg.Vo_target
    tail = trace.vo[trace.t >= trace.t[0] + Ts + m.settle_time]
    assert np.all(np.abs(tail - cfg.Vo_target) <= 0.01 * cfg.Vo_target)
    assert math.isfinite(m.load_regulation)
    assert m.Io == pytest.approx(0.3, rel=1e-2)


def test_load_step_open_loop_matches_analytic_slope():
    p = ConverterParams(topology=Topology.ASYNCHRONOUS)
    D = 0.5
    _, m = load_step(p, ControlConfig.open_loop(D), 0.15, 0.3, 2e-6)
    slope = -(D * p.RDSon_hs + p.RL)
    assert m.load_regulation == pytest.approx(slope, rel=5e-2)


def test_load_step_rejects_negative():
    with pytest.raises(InvalidParameterError):
        load_step(ConverterParams(), ControlConfig(), -0.1, 0.3, 2e-6)


# sweeps


def test_single_point_sweep_equals_run():
    p = ConverterParams()
    r = sweep(p, ControlConfig(), "io", [0.1])
    _, m = run_to_steady_state(ConverterParams(R=1.8 / 0.1), ControlConfig())
    assert len(r.rows) == 1
    assert r.rows[0]["Vo_avg"] == m.Vo_avg
    assert r.rows[0]["efficiency"] == m.efficiency


def test_parallel_sweep_keeps_grid_order():
    grid = [0.3, 0.01, 0.1, 0.05]
    serial = sweep(ConverterParams(), ControlConfig(), "io", grid)
    parallel = sweep(ConverterParams(), ControlConfig(), "io", grid, workers=2)
    assert [r["io"] for r in parallel.rows] == grid
    assert serial.rows == parallel.rows


def test_sweep_records_failures():
    r = sweep(ConverterParams(), ControlConfig(), "io", [0.1, 0.2], max_periods=3)
    assert [row["failed"] for row in r.rows] == [1, 1]
    assert all(math.isnan(row["Vo_avg"]) for row in r.rows)


def test_line_sweep():
    r = sweep(ConverterParams(R=6.0), ControlConfig(), "vi", [2.6, 3.4, 4.2])
    assert math.isfinite(r.line_regulation)
    assert abs(r.line_regulation) < 0.01


# export


def test_csv_export(tmp_path):
    trace, m = run_to_steady_state(params_for_k(0.1), ControlConfig.open_loop(0.2))
    write_trace_csv(trace, tmp_path / "t.csv")
    write_metrics_csv(m, tmp_path / "m.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,iL,vC,vo,cond,duty"
    assert len(lines) == len(trace.t) + 1
    first = lines[1].split(",")
    assert float(first[0]) == trace.t[0]
    assert "e" in first[1]
    rows = dict(l.split(",", 1) for l in (tmp_path / "m.csv").read_text().splitlines()[1:])
    assert float(rows["Vo_avg"]) == m.Vo_avg
    assert rows["mode"] == "DCM"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.csv", "t.csv"]


def test_simulator_is_deterministic():
    def run():
        sim = Simulator(ConverterParams(), ControlConfig(), state=PlantState(vC=1.0))
        return sim.record(50)

    a, b = run(), run()
    np.testing.assert_array_equal(a.iL, b.iL)
    np.testing.assert_array_equal(a.t, b.t)
