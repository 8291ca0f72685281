"""Event-driven time-domain simulation and measurement.

The stage is piecewise affine, so inside one conduction phase a fixed RK4
step reduces to a constant affine map ``x -> Phi x + gamma`` (the RK4
stability polynomial of ``h·A``). Segments are advanced with precomputed
powers of that map, clock-scheduled edges are hit exactly, and state events
(current zero crossing, peak-current trip) are located inside the step that
brackets them by Illinois regula falsi on partial RK4 steps. The 2 µs load
ramp is the only time-varying interval; it is stepped with plain RK4.
"""

from __future__ import annotations

import copy
import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import analysis
from .control import (
    BurstDecision,
    ControllerState,
    SwitchCommand,
    burst_decision,
    off_sequence,
    peak_current_command,
    sequence_asynchronous,
    sequence_synchronous,
    slope_compensation,
    voltage_mode_duty,
)
from .dynamics import (
    COND_OF_PHASE,
    Phase,
    affine_model,
    capacitor_current,
    inductor_voltage,
    output_voltage_of,
    peak_residual,
    slopes,
    zero_residual,
)
from .model import (
    ConductionState,
    ControlConfig,
    ConvergenceError,
    ConverterParams,
    InvalidParameterError,
    Mode,
    PlantState,
    Scheme,
    SimulationDivergence,
    Topology,
    UnreachableTarget,
    validate,
    validate_control,
)

DEFAULT_STEPS = 256


# ---------------------------------------------------------------------------
# records


@dataclass
class CycleRecord:
    t0: float
    duty: float
    ipk: float
    skipped: bool = False
    switched: bool = False
    min_on_violation: bool = False


@dataclass
class Trace:
    """Sampled waveforms.

    The phase of sample ``j`` holds on ``[t[j], t[j+1])``; a sample taken at
    an event instant carries the phase entered there.
    """

    t: np.ndarray
    iL: np.ndarray
    vC: np.ndarray
    vo: np.ndarray
    phase: np.ndarray
    duty: np.ndarray
    R: np.ndarray
    cycles: list[CycleRecord]
    sample_period: float

    @property
    def cond(self) -> list[str]:
        return [COND_OF_PHASE[Phase(p)].value for p in self.phase]

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def __len__(self) -> int:
        return len(self.t)

    def to_csv(self, path) -> None:
        write_trace_csv(self, path)


@dataclass
class Metrics:
    Vo_avg: float = math.nan
    Vo_ripple_pp: float = math.nan
    vC_ripple_pp: float = math.nan
    iL_ripple_pp: float = math.nan
    Ipk: float = math.nan
    iL_min: float = math.nan
    Io: float = math.nan
    efficiency: float = math.nan
    mode: Mode = Mode.CCM
    load_regulation: float = math.nan
    line_regulation: float = math.nan
    settle_time: float = math.nan
    Pin: float = math.nan
    Pout: float = math.nan
    P_conduction_in: float = math.nan
    P_quiescent: float = math.nan
    P_switching: float = math.nan
    P_loss_RL: float = math.nan
    P_loss_hs: float = math.nan
    P_loss_ls: float = math.nan
    P_loss_diode: float = math.nan
    P_loss_esr: float = math.nan
    energy_residual: float = math.nan
    volt_second: float = math.nan
    charge_balance: float = math.nan
    D: float = math.nan
    D2: float = math.nan
    D3: float = math.nan
    window: float = math.nan
    n_cycles: int = 0
    n_skipped: int = 0
    periods_to_converge: int = 0

    def as_rows(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


# ---------------------------------------------------------------------------
# stepping kernels


def rk4_affine_map(A, b, h: float) -> np.ndarray:
    """2x3 matrix ``[Phi | gamma]`` of one RK4 step of ``x' = A x + b``."""
    A = np.asarray(A, dtype=float)
    # overflow here surfaces later as a non-finite state (SimulationDivergence)
    with np.errstate(over="ignore", invalid="ignore"):
        Z = h * A
        Z2 = Z @ Z
        T = np.eye(2) + Z / 2.0 + Z2 / 6.0 + (Z2 @ Z) / 24.0
        Phi = np.eye(2) + Z @ T
        gamma = h * (T @ np.asarray(b, dtype=float))
    return np.hstack([Phi, gamma[:, None]])


class _PhaseModel:
    __slots__ = ("A", "b", "powers", "h")

    def __init__(self, A, b, h: float, n_max: int):
        self.A, self.b, self.h = A, b, h
        step = rk4_affine_map(A, b, h)
        H = np.vstack([step, [0.0, 0.0, 1.0]])
        powers = np.empty((n_max + 1, 3, 3))
        powers[0] = np.eye(3)
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(1, n_max + 1):
                powers[j] = H @ powers[j - 1]
        self.powers = powers[:, :2, :]

    def partial(self, h: float) -> np.ndarray:
        return rk4_affine_map(self.A, self.b, h)


def _rk4_step(phase: Phase, x, t: float, h: float, params: ConverterParams,
              R_fn: Callable[[float], float]):
    iL, vC = x

    def f(tt, a, c):
        return slopes(phase, a, c, params, R_fn(tt))

    k1 = f(t, iL, vC)
    k2 = f(t + h / 2, iL + h / 2 * k1[0], vC + h / 2 * k1[1])
    k3 = f(t + h / 2, iL + h / 2 * k2[0], vC + h / 2 * k2[1])
    k4 = f(t + h, iL + h * k3[0], vC + h * k3[1])
    return (iL + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            vC + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))


@dataclass
class _Event:
    """A state event; ``g`` is positive before it fires and <= 0 after."""

    kind: str  # "zero" or "peak"
    sign: float = 1.0
    ipk: float = math.inf
    mc: float = 0.0
    t_cycle: float = 0.0

    def g(self, iL, t):
        if self.kind == "zero":
            return self.sign * zero_residual(iL)
        return -peak_residual(iL, t - self.t_cycle, self.ipk, self.mc)


def _illinois(g: Callable[[float], float], g_a: float, g_b: float, tol: float,
              max_iter: int = 100) -> float:
    """Root of ``g`` on [0, 1] with ``g(0) > 0 >= g(1)``; returns the <= 0 side."""
    a, b = 0.0, 1.0
    side = 0
    for _ in range(max_iter):
        if b - a <= tol:
            break
        c = b - g_b * (b - a) / (g_b - g_a) if g_b != g_a else 0.5 * (a + b)
        if not a < c < b:
            c = 0.5 * (a + b)
        g_c = g(c)
        if g_c > 0:
            a, g_a = c, g_c
            if side == -1:
                g_b *= 0.5
            side = -1
        else:
            b, g_b = c, g_c
            if g_c == 0:
                break
            if side == 1:
                g_a *= 0.5
            side = 1
    return b


# ---------------------------------------------------------------------------
# load schedule


class LoadSchedule:
    """Load resistance versus time: constant, or a linear current ramp."""

    def __init__(self, R: float):
        self.R0 = R
        self.ramp: Optional[tuple[float, float, float, float]] = None

    def set_ramp(self, t_start: float, duration: float, G_from: float, G_to: float):
        self.ramp = (t_start, duration, G_from, G_to)

    def breakpoints(self) -> list[float]:
        if self.ramp is None:
            return []
        t0, dur = self.ramp[0], self.ramp[1]
        return [t0, t0 + dur]

    def R(self, t: float) -> float:
        if self.ramp is None:
            return self.R0
        t0, dur, g0, g1 = self.ramp
        if t <= t0:
            G = g0
        elif dur <= 0 or t >= t0 + dur:
            G = g1
        else:
            G = g0 + (g1 - g0) * (t - t0) / dur
        return math.inf if G == 0 else 1.0 / G

    def varies_on(self, t0: float, t1: float) -> bool:
        if self.ramp is None:
            return False
        s, dur = self.ramp[0], self.ramp[1]
        return dur > 0 and t0 < s + dur and t1 > s


def _conductance(R: float) -> float:
    return 0.0 if math.isinf(R) else 1.0 / R


# ---------------------------------------------------------------------------
# sample recorder


class _Recorder:
    def __init__(self):
        self.t, self.iL, self.vC, self.phase, self.R = [], [], [], [], []
        self.cycles: list[CycleRecord] = []
        self._cycle_start = 0
        self.duty: list[np.ndarray] = []
        self._last = None

    def add(self, t, X, phase: Phase, R):
        # drop the final point: the next segment starts there with its own phase
        n = len(t) - 1
        if n <= 0:
            self._last = (t[-1], X[-1, 0], X[-1, 1], phase, R)
            return
        self.t.append(np.asarray(t[:n]))
        self.iL.append(np.asarray(X[:n, 0]))
        self.vC.append(np.asarray(X[:n, 1]))
        self.phase.append(np.full(n, int(phase), dtype=np.int8))
        self.R.append(np.broadcast_to(np.asarray(R, dtype=float), (len(t),))[:n].copy())
        self._last = (t[-1], X[-1, 0], X[-1, 1], phase, R)

    def sample_count(self) -> int:
        return sum(len(a) for a in self.t)

    def close_cycle(self, rec: CycleRecord):
        n = self.sample_count()
        self.duty.append(np.full(n - self._cycle_start, rec.duty))
        self._cycle_start = n
        self.cycles.append(rec)

    def finish(self, params: ConverterParams, sample_period: float, x_end, phase_end: Phase,
               R_end: float) -> Trace:
        t_end = self._last[0] if self._last is not None else None
        t = np.concatenate(self.t + [np.array([t_end])])
        iL = np.concatenate(self.iL + [np.array([x_end[0]])])
        vC = np.concatenate(self.vC + [np.array([x_end[1]])])
        phase = np.concatenate(self.phase + [np.array([int(phase_end)], dtype=np.int8)])
        R = np.concatenate(self.R + [np.array([R_end])])
        n = len(t) - 1
        if self._cycle_start < n:
            last_duty = self.cycles[-1].duty if self.cycles else 0.0
            self.duty.append(np.full(n - self._cycle_start, last_duty))
        duty = np.concatenate(self.duty + [np.array([self.duty[-1][-1] if self.duty else 0.0])])
        il_eff = np.where(phase == int(Phase.IDLE), 0.0, iL)
        vo = (vC + params.RC * il_eff) / (1.0 + params.RC / R)
        return Trace(t=t, iL=iL, vC=vC, vo=vo, phase=phase, duty=duty, R=R,
                     cycles=list(self.cycles), sample_period=sample_period)


# ---------------------------------------------------------------------------
# simulator


class Simulator:
    """Stateful cycle-by-cycle simulation of one converter under one controller."""

    def __init__(self, params: ConverterParams, cfg: ControlConfig, *,
                 steps_per_period: int = DEFAULT_STEPS, event_tol: float = 1e-10,
                 state: Optional[PlantState] = None,
                 controller: Optional[ControllerState] = None):
        self.p = validate(params)
        self.cfg = validate_control(cfg, params)
        if steps_per_period < 1:
            raise InvalidParameterError("steps_per_period must be positive")
        self.Ts = params.Ts
        self.steps = int(steps_per_period)
        self.h = self.Ts / self.steps
        self.event_tol = event_tol
        state = state or PlantState()
        self.x = (float(state.iL), float(state.vC))
        self.t_origin = float(state.t)
        self.k = 0
        self.ctrl = controller or ControllerState()
        self.load = LoadSchedule(params.R)
        self.mc = slope_compensation(cfg, params)
        self.diode_emulation = params.synchronous and cfg.scheme is Scheme.BURST
        self._models: dict = {}
        self.phase = Phase.IDLE if self.x[0] == 0.0 else (
            Phase.DIODE if self.x[0] > 0 else Phase.LOW)
        self._rec: Optional[_Recorder] = None

    # -- time bookkeeping

    @property
    def t(self) -> float:
        return self.t_origin + self.k * self.Ts

    def _model(self, phase: Phase, R: float) -> _PhaseModel:
        key = (phase, R)
        m = self._models.get(key)
        if m is None:
            A, b = affine_model(phase, self.p, R)
            m = _PhaseModel(A, b, self.h, self.steps + 1)
            self._models[key] = m
        return m

    def vo(self, R: Optional[float] = None) -> float:
        R = self.load.R(self.t) if R is None else R
        iL = 0.0 if self.phase is Phase.IDLE else self.x[0]
        return float(output_voltage_of(iL, self.x[1], self.p, R))

    # -- segment integration

    def _advance_affine(self, phase, x, t0, t1, events, R):
        m = self._model(phase, R)
        h = self.h
        span = t1 - t0
        n = int(span / h)
        rem = span - n * h
        if rem < 1e-9 * h:
            rem = 0.0
        elif rem > h * (1 - 1e-9):
            n, rem = n + 1, 0.0
        n = min(n, self.steps + 1)
        v = np.array([x[0], x[1], 1.0])
        need_samples = bool(events) or self._rec is not None
        if not need_samples:
            xe = m.powers[n] @ v
            if rem > 0:
                xe = m.partial(rem) @ np.array([xe[0], xe[1], 1.0])
            return None, None, (float(xe[0]), float(xe[1])), t1, None
        X = m.powers[: n + 1] @ v
        t = t0 + h * np.arange(n + 1)
        if rem > 0:
            xl = m.partial(rem) @ np.array([X[-1, 0], X[-1, 1], 1.0])
            X = np.vstack([X, xl])
            t = np.append(t, t1)
        else:
            t[-1] = t1
        fired, j = None, None
        for ev in events:
            g = ev.g(X[:, 0], t)
            hits = np.nonzero(g[1:] <= 0)[0]
            if len(hits) and (j is None or hits[0] + 1 < j):
                j, fired = hits[0] + 1, ev
        if fired is None:
            return t, X, (float(X[-1, 0]), float(X[-1, 1])), t1, None
        ta, xa = t[j - 1], X[j - 1]
        hj = t[j] - ta
        va = np.array([xa[0], xa[1], 1.0])

        def g_of(theta):
            xs = m.partial(theta * hj) @ va
            return float(fired.g(xs[0], ta + theta * hj))

        theta = _illinois(g_of, float(fired.g(xa[0], ta)), float(fired.g(X[j, 0], t[j])),
                          self.event_tol * self.Ts / hj)
        xe = m.partial(theta * hj) @ va
        te = ta + theta * hj
        t = np.append(t[:j], te)
        X = np.vstack([X[:j], xe])
        return t, X, (float(xe[0]), float(xe[1])), te, fired

    def _advance_varying(self, phase, x, t0, t1, events):
        R_fn = self.load.R
        n = max(1, int(math.ceil((t1 - t0) / self.h - 1e-9)))
        h = (t1 - t0) / n
        ts, xs = [t0], [x]
        for i in range(n):
            ta = ts[-1]
            tb = t1 if i == n - 1 else t0 + (i + 1) * h
            xb = _rk4_step(phase, xs[-1], ta, tb - ta, self.p, R_fn)
            for ev in events:
                if ev.g(xb[0], tb) <= 0:
                    xa = xs[-1]
                    hh = tb - ta

                    def g_of(theta, ev=ev, xa=xa, ta=ta, hh=hh):
                        xx = _rk4_step(phase, xa, ta, theta * hh, self.p, R_fn)
                        return ev.g(xx[0], ta + theta * hh)

                    theta = _illinois(g_of, ev.g(xa[0], ta), ev.g(xb[0], tb),
                                      self.event_tol * self.Ts / hh)
                    xe = _rk4_step(phase, xa, ta, theta * hh, self.p, R_fn)
                    te = ta + theta * hh
                    ts.append(te)
                    xs.append(xe)
                    return np.array(ts), np.array(xs), xe, te, ev
            ts.append(tb)
            xs.append(xb)
        return np.array(ts), np.array(xs), xs[-1], t1, None

    def _run(self, phase: Phase, x, t0: float, t1: float, events: Sequence[_Event]):
        """Advance in ``phase`` from t0 toward t1, splitting at load breakpoints."""
        bps = [b for b in self.load.breakpoints() if t0 < b < t1]
        edges = [t0] + bps + [t1]
        for a, b in zip(edges[:-1], edges[1:]):
            if self.load.varies_on(a, b):
                t, X, xe, te, fired = self._advance_varying(phase, x, a, b, events)
                Rs = np.array([self.load.R(tt) for tt in t])
            else:
                R = self.load.R(0.5 * (a + b))
                t, X, xe, te, fired = self._advance_affine(phase, x, a, b, events, R)
                Rs = R
            if not (math.isfinite(xe[0]) and math.isfinite(xe[1])):
                raise SimulationDivergence(f"non-finite state at t={te:.9g} s", te)
            if self._rec is not None and t is not None:
                self._rec.add(t, X, phase, Rs)
            x = xe
            if fired is not None:
                return x, te, fired
        return x, t1, None

    def _free_phase(self, iL: float) -> Phase:
        if iL > 0:
            return Phase.DIODE
        if iL < 0:
            return Phase.REVERSE_DIODE
        return Phase.IDLE

    def _interval(self, phase: Phase, x, t0: float, t1: float, extra: Sequence[_Event] = ()):
        """Run one command interval, dropping to Idle if the current reaches zero."""
        if t1 <= t0:
            return x, t0, None
        events = list(extra)
        zero_allowed = (phase in (Phase.DIODE, Phase.REVERSE_DIODE)
                        or (phase is Phase.LOW and self.diode_emulation)
                        or (phase is Phase.HIGH and not self.p.synchronous))
        if phase is Phase.IDLE:
            x = (0.0, x[1])
        elif zero_allowed:
            if x[0] == 0.0:
                if phase is Phase.HIGH:
                    diL = slopes(phase, 0.0, x[1], self.p, self.load.R(t0))[0]
                    if diL < 0:
                        phase = Phase.IDLE
                else:
                    phase = Phase.IDLE
            if phase is not Phase.IDLE:
                events.append(_Event("zero", sign=1.0 if x[0] > 0 or phase is Phase.HIGH
                                     else -1.0))
        self.phase = phase
        x, te, fired = self._run(phase, x, t0, t1, events)
        if fired is not None and fired.kind == "zero":
            x = (0.0, x[1])
            self.phase = Phase.IDLE
            x, _, _ = self._run(Phase.IDLE, x, te, t1, [])
            return x, t1, None
        return x, te, fired

    # -- one switching cycle

    def _commands_tail(self, t_off_rel: float, skipped: bool) -> list[SwitchCommand]:
        if self.p.synchronous and not skipped:
            return off_sequence(t_off_rel, self.Ts, self.cfg.dead_time)
        return [SwitchCommand(False, False, self.Ts)] if t_off_rel < self.Ts else []

    def cycle(self, t_stop: Optional[float] = None) -> CycleRecord:
        p, cfg, Ts = self.p, self.cfg, self.Ts
        t0 = self.t
        t_end = t0 + Ts if t_stop is None else min(t0 + Ts, t_stop)
        vo = self.vo()
        scheme = cfg.scheme
        duty_cmd, ipk_cmd, skipped, violated = None, None, False, False
        if scheme is Scheme.OPEN_LOOP:
            duty_cmd = cfg.duty
        elif scheme is Scheme.VOLTAGE_MODE:
            duty_cmd = voltage_mode_duty(vo, cfg, self.ctrl, Ts)
        elif scheme is Scheme.CURRENT_MODE:
            ipk_cmd = peak_current_command(vo, cfg, self.ctrl, Ts)
        else:
            skip = burst_decision(vo, cfg, self.ctrl) is BurstDecision.SKIP
            if skip and peak_current_command(vo, cfg, copy.copy(self.ctrl), Ts) > cfg.burst_ipk:
                # the loop still asks for more than a minimum pulse: stay in PWM
                self.ctrl.burst_active = True
                skip = False
            if skip:
                skipped, duty_cmd = True, 0.0
            else:
                ipk_cmd = max(peak_current_command(vo, cfg, self.ctrl, Ts), cfg.burst_ipk)
        self.ctrl.last_clock = t0

        x = self.x
        if duty_cmd is not None:
            if p.synchronous and not skipped:
                cmds, violated = sequence_synchronous(duty_cmd, cfg, Ts)
            else:
                cmds = sequence_asynchronous(duty_cmd, Ts)
            t_on = cmds[0].valid_until if cmds and cmds[0].high_side else 0.0
            ipk_seen = x[0]
            t = t0
            for c in cmds:
                tb = min(t0 + c.valid_until, t_end)
                if c.high_side:
                    x, t, _ = self._interval(Phase.HIGH, x, t, tb)
                    ipk_seen = x[0]
                elif c.low_side:
                    x, t, _ = self._interval(Phase.LOW, x, t, tb)
                else:
                    x, t, _ = self._interval(self._free_phase(x[0]), x, t, tb)
                t = tb
                if t >= t_end:
                    break
        else:
            trip = _Event("peak", ipk=ipk_cmd, mc=self.mc, t_cycle=t0)
            if trip.g(x[0], t0) <= 0:
                t_off = t0
            else:
                x, t_off, fired = self._interval(Phase.HIGH, x, t0, t_end, [trip])
                if fired is None:
                    t_off = t0 + Ts if t_end >= t0 + Ts else t_end
            t_on = t_off - t0
            ipk_seen = x[0]
            t = t_off
            for c in self._commands_tail(t_on, skipped):
                if t >= t_end:
                    break
                tb = min(t0 + c.valid_until, t_end)
                phase = Phase.LOW if c.low_side else self._free_phase(x[0])
                x, _, _ = self._interval(phase, x, t, tb)
                t = tb
        self.x = x
        self.k += 1
        rec = CycleRecord(t0=t0, duty=t_on / Ts, ipk=float(ipk_seen), skipped=skipped,
                          switched=t_on > 0, min_on_violation=violated)
        if self._rec is not None:
            self._rec.close_cycle(rec)
        return rec

    # -- recording

    def record(self, n_cycles: Optional[int] = None, *, until: Optional[Callable] = None,
               t_stop: Optional[float] = None, max_cycles: int = 1_000_000) -> Trace:
        """Run and record ``n_cycles`` cycles (or until ``until(rec)`` is true)."""
        self._rec = _Recorder()
        try:
            count = 0
            while True:
                if t_stop is not None and self.t >= t_stop - 1e-12 * self.Ts:
                    break
                rec = self.cycle(t_stop=t_stop)
                count += 1
                if n_cycles is not None and count >= n_cycles:
                    break
                if until is not None and until(rec):
                    break
                if count >= max_cycles:
                    break
            t_last = self._rec._last[0]
            return self._rec.finish(self.p, self.h, self.x, self.phase, self.load.R(t_last))
        finally:
            self._rec = None

    def snapshot(self):
        return (self.x, self.k, copy.copy(self.ctrl), self.phase)

    def restore(self, snap) -> None:
        self.x, self.k, ctrl, self.phase = snap
        self.ctrl = copy.copy(ctrl)


# ---------------------------------------------------------------------------
# public simulation entry points


def simulate(params: ConverterParams, cfg: ControlConfig, t_end: float,
             init: Optional[PlantState] = None, *, steps_per_period: int = DEFAULT_STEPS,
             controller: Optional[ControllerState] = None) -> Trace:
    """Integrate from ``init`` up to ``t_end`` and return the full trace."""
    validate(params)
    t_start = 0.0 if init is None else init.t
    if t_end - t_start < params.Ts * (1 - 1e-12):
        raise InvalidParameterError("t_end too small: must cover at least one period")
    sim = Simulator(params, cfg, steps_per_period=steps_per_period, state=init,
                    controller=controller)
    return sim.record(t_stop=t_end)


def _memoryless(cfg: ControlConfig) -> bool:
    return cfg.scheme is Scheme.OPEN_LOOP or (
        cfg.scheme is Scheme.CURRENT_MODE and cfg.ipk_cmd is not None)


def initial_guess(params: ConverterParams, cfg: ControlConfig
                  ) -> tuple[PlantState, ControllerState]:
    """Analytic estimate of the periodic state at a clock edge, plus a
    bumpless controller preset."""
    p = params
    Ts = p.Ts
    ctrl = ControllerState()
    mc = slope_compensation(cfg, p)

    def ccm_point(D):
        vo = analysis.vo_ccm_lossy(p, D)
        io = vo / p.R
        try:
            dil = analysis.ripple_on(p, D, io)
        except ValueError:
            dil = 0.0
        return vo, io, dil

    def dcm_duty(vo):
        K = analysis.k_param(p)
        M = min(max(vo / p.Vi, 1e-9), 1 - 1e-9)
        return min(math.sqrt(4 * K / ((2 / M - 1) ** 2 - 1)), 1.0)

    if cfg.scheme is Scheme.CURRENT_MODE and cfg.ipk_cmd is not None:
        # fixed peak command: iterate for the operating point it implies
        vo = min(cfg.ipk_cmd * (p.R if math.isfinite(p.R) else 1e3), p.Vi) * 0.5
        for _ in range(50):
            try:
                D = analysis.duty_for_vo(p, vo)
            except UnreachableTarget:
                D = 1.0
            dil = max(p.Vi - vo, 0.0) * D * Ts / p.L
            io = max(cfg.ipk_cmd - mc * D * Ts - 0.5 * dil, 0.0)
            vo_new = min(io * p.R, p.Vi) if math.isfinite(p.R) else p.Vi
            vo = 0.5 * (vo + vo_new)
        valley = io - 0.5 * dil
        if not p.synchronous:
            valley = max(valley, 0.0)
        return PlantState(iL=valley, vC=vo), ctrl

    if cfg.scheme is Scheme.OPEN_LOOP:
        D = cfg.duty
        if D > 0 and not p.synchronous and analysis.conduction_mode(p, D) is Mode.DCM:
            return PlantState(iL=0.0, vC=analysis.vo_dcm(p, D)), ctrl
        vo, io, dil = ccm_point(D)
        valley = io - 0.5 * dil
        if not p.synchronous:
            valley = max(valley, 0.0)
        return PlantState(iL=valley, vC=vo), ctrl

    vo = cfg.Vo_target
    io = vo / p.R
    try:
        D = _sync_duty(p, vo, io) if p.synchronous else analysis.duty_for_vo(p, vo)
    except UnreachableTarget:
        D = 1.0
    dcm = (not p.synchronous or cfg.scheme is Scheme.BURST) and 0 < D < 1 and \
        analysis.conduction_mode(p, D) is Mode.DCM
    if dcm:
        D = dcm_duty(vo)
        ipk = (p.Vi - vo) * D * Ts / p.L
        iL0 = 0.0
    else:
        dil = max(p.Vi - vo, 0.0) * D * Ts / p.L
        ipk = io + 0.5 * dil
        iL0 = io - 0.5 * dil
        if not p.synchronous:
            iL0 = max(iL0, 0.0)
    if cfg.ki > 0:
        if cfg.scheme is Scheme.VOLTAGE_MODE:
            ctrl.integrator = (cfg.ramp_valley + D * cfg.Vramp_pp) / cfg.ki
        else:
            ctrl.integrator = min(ipk + mc * D * Ts, cfg.ilimit) / cfg.ki
    return PlantState(iL=iL0, vC=vo), ctrl


def _sync_duty(p: ConverterParams, vo: float, io: float) -> float:
    # average switch-node voltage with both switches resistive (dead time ignored)
    den = p.Vi - io * (p.RDSon_hs - p.RDSon_ls)
    D = (vo + io * (p.RL + p.RDSon_ls)) / den if den > 0 else math.inf
    if not 0.0 <= D <= 1.0:
        raise UnreachableTarget(f"Vo_target={vo} V is unreachable")
    return D


def _residual(x_prev, x_new, ipk: float, vref: float) -> float:
    si = max(abs(ipk), 1e-3)
    sv = max(abs(vref), 1e-3)
    return max(abs(x_new[0] - x_prev[0]) / si, abs(x_new[1] - x_prev[1]) / sv)


def _shoot(sim: Simulator, iters: int = 6, tol: float = 1e-10) -> None:
    """Newton iteration on the period map of a memoryless controller."""
    snap = sim.snapshot()

    def F(x):
        sim.restore(snap)
        sim.x = (float(x[0]), float(x[1]))
        sim.phase = sim._free_phase(sim.x[0]) if sim.x[0] != 0 else Phase.IDLE
        rec = sim.cycle()
        return np.array(sim.x), rec.ipk

    x = np.array(snap[0], dtype=float)
    try:
        for _ in range(iters):
            fx, ipk = F(x)
            si, sv = max(abs(ipk), 1e-3), max(abs(x[1]), 1e-3)
            r = fx - x
            if max(abs(r[0]) / si, abs(r[1]) / sv) < tol:
                break
            J = np.empty((2, 2))
            d = np.array([1e-6 * si, 1e-6 * sv])
            for i in range(2):
                xp = x.copy()
                xp[i] += d[i]
                J[:, i] = (F(xp)[0] - fx) / d[i]
            if np.max(np.abs(np.linalg.eigvals(J))) > 1.0:
                # the periodic orbit exists but is unstable: a real circuit
                # never sits on it, so leave the start point alone
                x = np.array(snap[0], dtype=float)
                break
            try:
                dx = np.linalg.solve(J - np.eye(2), -r)
            except np.linalg.LinAlgError:
                break
            x = x + dx
            if not sim.p.synchronous:
                x[0] = max(x[0], 0.0)
            if not np.all(np.isfinite(x)):
                x = np.array(snap[0], dtype=float)
                break
    finally:
        sim.restore(snap)
    sim.x = (float(x[0]), float(x[1]))
    sim.phase = sim._free_phase(sim.x[0]) if sim.x[0] != 0 else Phase.IDLE


@dataclass
class _BurstStart:
    cycle: int
    x: tuple
    integrator: float


def _settle(sim: Simulator, *, tol: float = 1e-6, max_periods: int = 10_000,
            burst_tol: float = 1e-3, shoot: bool = True, min_periods: int = 0
            ) -> tuple[Trace, Metrics]:
    """Iterate cycles to a periodic regime, then record and measure it."""
    cfg = sim.cfg
    if shoot and _memoryless(cfg) and sim.load.ramp is None:
        _shoot(sim)
    burst = cfg.scheme is Scheme.BURST
    starts: list[_BurstStart] = []
    prev_skipped = False
    x_prev = sim.x
    res = math.inf
    for n in range(1, max_periods + 1):
        rec = sim.cycle()
        if burst and prev_skipped and not rec.skipped:
            # burst start: the state at this clock edge was x_prev
            starts.append(_BurstStart(n, x_prev, sim.ctrl.integrator))
            found = _burst_period(starts, burst_tol, sim.cfg)
            if found is not None and n >= min_periods:
                trace = _record_bursts(sim, found)
                metrics = measure(trace, sim.p, cfg)
                metrics.periods_to_converge = n
                return trace, metrics
        prev_skipped = rec.skipped
        res = _residual(x_prev, sim.x, rec.ipk, sim.x[1])
        x_prev = sim.x
        if res < tol and n >= min_periods:
            trace = sim.record(1)
            metrics = measure(trace, sim.p, cfg)
            metrics.periods_to_converge = n
            return trace, metrics
    raise ConvergenceError(
        f"no periodic steady state after {max_periods} periods (residual {res:.3g})", res)


def _burst_period(starts: list[_BurstStart], tol: float, cfg: ControlConfig,
                  max_bursts: int = 8) -> Optional[int]:
    """Smallest number of bursts after which the burst-start state recurs."""
    if len(starts) < 2:
        return None
    last = starts[-1]
    scale_i = max(cfg.burst_ipk, 1e-3)
    for m in range(1, min(max_bursts, len(starts) - 1) + 1):
        ref = starts[-1 - m]
        d = max(abs(last.x[0] - ref.x[0]) / scale_i,
                abs(last.x[1] - ref.x[1]) / max(abs(ref.x[1]), 1e-3))
        if cfg.ki > 0:
            d = max(d, abs(last.integrator - ref.integrator) * cfg.ki / cfg.ilimit)
        if d < tol:
            return m
    return None


def _next_runs(sim: Simulator) -> bool:
    """Burst decision the controller would take at the coming clock edge."""
    return burst_decision(sim.vo(), sim.cfg, copy.copy(sim.ctrl)) is BurstDecision.RUN


def _record_bursts(sim: Simulator, m: int) -> Trace:
    """Record ``m`` whole bursts, from one burst-start edge to another."""
    prev_skipped = False
    while not (prev_skipped and _next_runs(sim)):
        prev_skipped = sim.cycle().skipped
    state = {"starts": 0}

    def until(rec):
        if rec.skipped and _next_runs(sim):
            state["starts"] += 1
            return state["starts"] >= m
        return False

    return sim.record(until=until)


def run_to_steady_state(params: ConverterParams, cfg: ControlConfig, *,
                        steps_per_period: int = DEFAULT_STEPS, tol: float = 1e-6,
                        max_periods: int = 10_000, init: Optional[PlantState] = None,
                        controller: Optional[ControllerState] = None,
                        burst_tol: float = 1e-3) -> tuple[Trace, Metrics]:
    """Trace of the final period (or burst super-period) and its metrics."""
    sim = make_simulator(params, cfg, steps_per_period=steps_per_period, init=init,
                         controller=controller)
    return _settle(sim, tol=tol, max_periods=max_periods, burst_tol=burst_tol)


def make_simulator(params: ConverterParams, cfg: ControlConfig, *,
                   steps_per_period: int = DEFAULT_STEPS, init: Optional[PlantState] = None,
                   controller: Optional[ControllerState] = None) -> Simulator:
    if init is None:
        guess, ctrl = initial_guess(validate(params), validate_control(cfg, params))
        init = guess
        controller = controller or ctrl
    return Simulator(params, cfg, steps_per_period=steps_per_period, state=init,
                     controller=controller)


# ---------------------------------------------------------------------------
# measurement


def _interval_integral(f_left, f_right, dt) -> float:
    return float(np.sum(0.5 * (f_left + f_right) * dt))


def _power_terms(trace: Trace, params: ConverterParams) -> dict:
    """Time integrals of the power flows over the trace window."""
    p = params
    t = trace.t
    dt = np.diff(t)
    ph = trace.phase[:-1]
    out = {}

    def both(fn):
        left = fn(trace.iL[:-1], trace.vC[:-1], trace.R[:-1])
        right = fn(trace.iL[1:], trace.vC[1:], trace.R[1:])
        return _interval_integral(left, right, dt)

    hi = ph == int(Phase.HIGH)
    lo = ph == int(Phase.LOW)
    di = ph == int(Phase.DIODE)
    rd = ph == int(Phase.REVERSE_DIODE)
    idle = ph == int(Phase.IDLE)
    cond = ~idle

    def iL_eff(iL):
        return np.where(cond, iL, 0.0)

    def vo_of(iL, vC, R):
        return (vC + p.RC * iL_eff(iL)) / (1.0 + p.RC / R)

    def G(R):
        return np.where(np.isinf(R), 0.0, 1.0 / np.where(np.isinf(R), 1.0, R))

    out["vo"] = both(lambda i, v, R: vo_of(i, v, R))
    out["out"] = both(lambda i, v, R: vo_of(i, v, R) ** 2 * G(R))
    out["io"] = both(lambda i, v, R: vo_of(i, v, R) * G(R))
    out["in"] = both(lambda i, v, R: p.Vi * i * (hi | rd))
    out["RL"] = both(lambda i, v, R: iL_eff(i) ** 2 * p.RL)
    out["hs"] = both(lambda i, v, R: i ** 2 * p.RDSon_hs * hi)
    out["ls"] = both(lambda i, v, R: i ** 2 * p.RDSon_ls * lo)
    out["diode"] = both(lambda i, v, R: p.Vd * np.abs(i) * (di | rd))
    out["esr"] = both(lambda i, v, R: (iL_eff(i) - vo_of(i, v, R) * G(R)) ** 2 * p.RC)

    vsw = np.select([hi, di, rd], [p.Vi, -p.Vd, p.Vi + p.Vd], 0.0)
    rser = np.select([hi, lo], [p.RDSon_hs + p.RL, p.RDSon_ls + p.RL], p.RL)
    out["vL"] = both(lambda i, v, R: np.where(cond, vsw - i * rser - vo_of(i, v, R), 0.0))
    out["iC"] = both(lambda i, v, R: iL_eff(i) - vo_of(i, v, R) * G(R))
    out["T_hs"] = float(np.sum(dt[hi]))
    out["T_free"] = float(np.sum(dt[lo | di | rd]))
    out["T_idle"] = float(np.sum(dt[idle]))
    return out


def _switching_energy(trace: Trace, params: ConverterParams) -> float:
    p = params
    e = 0.0
    for c in trace.cycles:
        if not c.switched:
            continue
        if not p.soft_switching:
            e += 0.5 * p.Vi * abs(c.ipk) * (p.tr + p.tf)
        e += p.Qg * p.Vg
    return e


def measure_efficiency(trace: Trace, params: ConverterParams,
                       cfg: Optional[ControlConfig] = None) -> float:
    """Output power over input power, including quiescent and switching draw."""
    T = trace.duration
    terms = _power_terms(trace, params)
    p_out = terms["out"] / T
    p_in = terms["in"] / T + params.Vi * params.Iq + _switching_energy(trace, params) / T
    if p_in <= 0:
        return 0.0
    return min(max(p_out / p_in, 0.0), 1.0)


def measure(trace: Trace, params: ConverterParams, cfg: Optional[ControlConfig] = None
            ) -> Metrics:
    p = params
    T = trace.duration
    terms = _power_terms(trace, p)
    p_out = terms["out"] / T
    p_cond = terms["in"] / T
    p_q = p.Vi * p.Iq
    p_sw = _switching_energy(trace, p) / T
    p_in = p_cond + p_q + p_sw
    losses = {k: terms[k] / T for k in ("RL", "hs", "ls", "diode", "esr")}
    il0, il1 = trace.iL[0], trace.iL[-1]
    vc0, vc1 = trace.vC[0], trace.vC[-1]
    dE = 0.5 * p.L * (il1 ** 2 - il0 ** 2) + 0.5 * p.C * (vc1 ** 2 - vc0 ** 2)
    balance = p_cond - p_out - sum(losses.values()) - dE / T
    ipk = float(np.max(trace.iL))
    io = terms["io"] / T
    scale_q = max(abs(io), abs(ipk), 1e-3) * T
    skipped = sum(1 for c in trace.cycles if c.skipped)
    if skipped:
        mode = Mode.BURST
    elif terms["T_idle"] > 0:
        mode = Mode.DCM
    else:
        mode = Mode.CCM
    return Metrics(
        Vo_avg=terms["vo"] / T,
        Vo_ripple_pp=float(np.ptp(trace.vo)),
        vC_ripple_pp=float(np.ptp(trace.vC)),
        iL_ripple_pp=float(np.ptp(trace.iL)),
        Ipk=ipk,
        iL_min=float(np.min(trace.iL)),
        Io=io,
        efficiency=min(max(p_out / p_in, 0.0), 1.0) if p_in > 0 else 0.0,
        mode=mode,
        Pin=p_in,
        Pout=p_out,
        P_conduction_in=p_cond,
        P_quiescent=p_q,
        P_switching=p_sw,
        P_loss_RL=losses["RL"],
        P_loss_hs=losses["hs"],
        P_loss_ls=losses["ls"],
        P_loss_diode=losses["diode"],
        P_loss_esr=losses["esr"],
        energy_residual=abs(balance) / p_in if p_in > 0 else abs(balance),
        volt_second=abs(terms["vL"]) / (p.Vi * T),
        charge_balance=abs(terms["iC"]) / scale_q,
        D=terms["T_hs"] / T,
        D2=terms["T_free"] / T,
        D3=terms["T_idle"] / T,
        window=T,
        n_cycles=len(trace.cycles),
        n_skipped=skipped,
    )


# ---------------------------------------------------------------------------
# load step


def _load_resistance(Vo_ref: float, current: float) -> float:
    return math.inf if current == 0 else Vo_ref / current


def _reference_voltage(params: ConverterParams, cfg: ControlConfig) -> float:
    if cfg.scheme is Scheme.OPEN_LOOP:
        return analysis.vo_ccm_lossy(params, cfg.duty)
    return cfg.Vo_target


def load_step(params: ConverterParams, cfg: ControlConfig, I_from: float, I_to: float,
              ramp: float = 2e-6, *, steps_per_period: int = DEFAULT_STEPS,
              band: float = 0.01, tol: float = 1e-6, max_periods: int = 10_000
              ) -> tuple[Trace, Metrics]:
    """Step the load current from ``I_from`` to ``I_to`` over ``ramp`` seconds.

    The transient trace starts one period before the step. ``settle_time``
    counts from the start of the ramp until ``vo`` last leaves the ±``band``
    window around the target (the regulation target for closed-loop schemes,
    the final average for open loop).
    """
    if I_from < 0 or I_to < 0 or ramp < 0:
        raise InvalidParameterError("load currents and ramp must be non-negative")
    Vo_ref = _reference_voltage(params, cfg)
    p_from = replace(params, R=_load_resistance(Vo_ref, I_from))
    sim = make_simulator(p_from, cfg, steps_per_period=steps_per_period)
    pre_trace, m_from = _settle(sim, tol=tol, max_periods=max_periods)
    if I_from == I_to:
        m = replace(m_from, settle_time=0.0, load_regulation=math.nan)
        return pre_trace, m

    R_to = _load_resistance(Vo_ref, I_to)
    t_step = sim.t
    sim.load = LoadSchedule(p_from.R)
    sim.load.set_ramp(t_step, ramp, _conductance(p_from.R), _conductance(R_to))
    ramp_periods = int(math.ceil(ramp / sim.Ts + 1e-9))

    state = {"x_prev": sim.x, "n": 0, "res": math.inf}

    def converged(rec):
        state["n"] += 1
        res = _residual(state["x_prev"], sim.x, rec.ipk, sim.x[1])
        state["x_prev"] = sim.x
        state["res"] = res
        if state["n"] <= ramp_periods + 1:
            return False
        if cfg.scheme is Scheme.BURST:
            return res < 1e-4 and state["n"] > 50
        return res < tol

    transient = sim.record(until=converged, max_cycles=max_periods)
    if state["n"] >= max_periods:
        raise ConvergenceError(
            f"no steady state after the load step within {max_periods} periods",
            state["res"])
    # constant load from here on
    sim.load = LoadSchedule(R_to)
    p_to = replace(params, R=R_to)
    sim.p = p_to
    sim._models.clear()
    final_trace, m_to = _settle(sim, tol=tol, max_periods=max_periods, shoot=False)

    full = concat_traces([pre_trace, transient])
    target = cfg.Vo_target if cfg.scheme is not Scheme.OPEN_LOOP else m_to.Vo_avg
    after = full.t >= t_step
    outside = np.nonzero(after & (np.abs(full.vo - target) > band * abs(target)))[0]
    settle = 0.0 if len(outside) == 0 else float(full.t[min(outside[-1] + 1, len(full.t) - 1)]
                                                  - t_step)
    d_io = m_to.Io - m_from.Io
    load_reg = (m_to.Vo_avg - m_from.Vo_avg) / d_io if d_io != 0 else math.nan
    return full, replace(m_to, settle_time=settle, load_regulation=load_reg)


def concat_traces(traces: Sequence[Trace]) -> Trace:
    """Join consecutive traces; a shared boundary sample is kept once."""
    parts = []
    for i, tr in enumerate(traces):
        sl = slice(0, len(tr) - 1) if i < len(traces) - 1 else slice(0, len(tr))
        parts.append((tr, sl))
    cat = {name: np.concatenate([getattr(tr, name)[sl] for tr, sl in parts])
           for name in ("t", "iL", "vC", "vo", "phase", "duty", "R")}
    cycles = [c for tr in traces for c in tr.cycles]
    return Trace(cycles=cycles, sample_period=traces[0].sample_period, **cat)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    axis: str
    rows: list[dict]
    line_regulation: float = math.nan

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, math.nan) for r in self.rows], dtype=float)


def _sweep_point(args):
    params, cfg, axis, value, kw = args
    try:
        if axis == "io":
            p = replace(params, R=_load_resistance(_reference_voltage(params, cfg), value))
        elif axis == "vi":
            p = replace(params, Vi=value)
        else:
            raise InvalidParameterError(f"unknown sweep axis {axis!r}")
        _, m = run_to_steady_state(p, cfg, **kw)
        return {axis: value, "Vo_avg": m.Vo_avg, "efficiency": m.efficiency,
                "mode": m.mode.value, "Io": m.Io, "Ipk": m.Ipk,
                "iL_ripple_pp": m.iL_ripple_pp, "Vo_ripple_pp": m.Vo_ripple_pp,
                "failed": 0, "error": ""}
    except (ConvergenceError, SimulationDivergence, InvalidParameterError, ValueError) as exc:
        return {axis: value, "Vo_avg": math.nan, "efficiency": math.nan, "mode": "",
                "Io": math.nan, "Ipk": math.nan, "iL_ripple_pp": math.nan,
                "Vo_ripple_pp": math.nan, "failed": 1, "error": str(exc)}


def sweep(params: ConverterParams, cfg: ControlConfig, axis: str, values: Sequence[float],
          *, workers: int = 1, **kw) -> SweepResult:
    """Steady-state metrics over a load-current (``io``) or input-voltage (``vi``) grid.

    Rows come back in grid order whatever the worker count.
    """
    jobs = [(params, cfg, axis, float(v), kw) for v in values]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    result = SweepResult(axis=axis, rows=rows)
    if axis == "vi":
        ok = [r for r in rows if not r["failed"]]
        if len(ok) >= 2 and ok[-1]["vi"] != ok[0]["vi"]:
            result.line_regulation = (ok[-1]["Vo_avg"] - ok[0]["Vo_avg"]) / (
                ok[-1]["vi"] - ok[0]["vi"])
    return result


# ---------------------------------------------------------------------------
# CSV export


def fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17e}"
    if isinstance(x, Mode):
        return x.value
    return str(x)


class _atomic_csv:
    """Write to a sibling temp file and rename into place on success."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self.tmp = f"{self.path}.tmp{os.getpid()}"

    def __enter__(self):
        self.fh = open(self.tmp, "w", newline="")
        return csv.writer(self.fh, lineterminator="\n")

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            os.unlink(self.tmp)
        return False


def write_trace_csv(trace: Trace, path) -> None:
    conds = trace.cond
    with _atomic_csv(path) as w:
        w.writerow(["t", "iL", "vC", "vo", "cond", "duty"])
        for i in range(len(trace.t)):
            w.writerow([fmt(trace.t[i]), fmt(trace.iL[i]), fmt(trace.vC[i]),
                        fmt(trace.vo[i]), conds[i], fmt(trace.duty[i])])


def write_metrics_csv(metrics: Metrics, path) -> None:
    write_rows_csv(metrics.as_rows(), path)


def write_rows_csv(rows, path) -> None:
    with _atomic_csv(path) as w:
        w.writerow(["key", "value"])
        for k, v in rows:
            w.writerow([k, fmt(v)])


SWEEP_COLUMNS = ("Vo_avg", "efficiency", "mode", "Io", "Ipk", "iL_ripple_pp",
                 "Vo_ripple_pp", "failed")


def write_sweep_csv(result: SweepResult, path) -> None:
    cols = ["index", result.axis, *SWEEP_COLUMNS]
    with _atomic_csv(path) as w:
        w.writerow(cols)
        for i, r in enumerate(result.rows):
            w.writerow([str(i)] + [fmt(r[c]) for c in cols[1:]])
