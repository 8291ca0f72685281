"""Cycle-by-cycle modulators.

All modulators act once per switching period at the clock edge, except the
peak-current comparator, whose trip instant is a state event located by the
engine (or by :func:`current_mode_cycle` for a known trajectory).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .dynamics import peak_residual, zero_residual
from .model import ControlConfig, ConverterParams, TimingSolution


class BurstDecision(Enum):
    RUN = "RunCycle"
    SKIP = "SkipCycle"


@dataclass(frozen=True)
class SwitchCommand:
    high_side: bool
    low_side: bool
    valid_until: float


@dataclass
class ControllerState:
    integrator: float = 0.0
    burst_active: bool = True  # False while cycles are being skipped
    last_clock: float = 0.0


def _pi(error: float, cfg: ControlConfig, st: ControllerState, dt: float,
        lo: float, hi: float) -> float:
    st.integrator += error * dt
    if cfg.ki > 0:
        # anti-windup: bound the integral term itself
        st.integrator = min(max(st.integrator, lo / cfg.ki), hi / cfg.ki)
    return cfg.kp * error + cfg.ki * st.integrator


def duty_from_control_voltage(vctrl: float, cfg: ControlConfig) -> float:
    return min(max((vctrl - cfg.ramp_valley) / cfg.Vramp_pp, 0.0), 1.0)


def voltage_mode_duty(vo: float, cfg: ControlConfig, st: ControllerState, dt: float) -> float:
    """PI error amplifier followed by the ramp comparator."""
    error = cfg.Vref - vo * cfg.fb_ratio
    vctrl = _pi(error, cfg, st, dt, cfg.ramp_valley, cfg.ramp_valley + cfg.Vramp_pp)
    return duty_from_control_voltage(vctrl, cfg)


def peak_current_command(vo: float, cfg: ControlConfig, st: ControllerState, dt: float) -> float:
    """Voltage-loop output in amps, or the fixed command when one is configured."""
    if cfg.ipk_cmd is not None:
        return cfg.ipk_cmd
    error = cfg.Vref - vo * cfg.fb_ratio
    cmd = _pi(error, cfg, st, dt, 0.0, cfg.ilimit)
    return min(max(cmd, 0.0), cfg.ilimit)


def slope_compensation(cfg: ControlConfig, params: ConverterParams) -> float:
    if cfg.slope_comp is not None:
        return cfg.slope_comp
    return cfg.Vo_target / params.L


def _first_crossing(fn: Callable[[float], float], Ts: float, n_grid: int = 1024,
                    tol: float = 1e-12) -> Optional[float]:
    """First ``t`` in ``[0, Ts]`` where ``fn`` becomes non-negative, or None."""
    if fn(0.0) >= 0:
        return 0.0
    grid = np.linspace(0.0, Ts, n_grid + 1)
    prev = 0.0
    for t in grid[1:]:
        if fn(t) >= 0:
            lo, hi = prev, t
            while hi - lo > tol * Ts:
                mid = 0.5 * (lo + hi)
                if fn(mid) >= 0:
                    hi = mid
                else:
                    lo = mid
            return hi
        prev = t
    return None


def current_mode_cycle(iL_trajectory: Callable[[float], float], ipk_cmd: float,
                       cfg: ControlConfig, Ts: float,
                       slope_comp: float | None = None,
                       iL_off: Callable[[float], float] | None = None) -> TimingSolution:
    """Peak current-mode timing for one cycle.

    ``iL_trajectory(t)`` is the inductor current with the high side on,
    ``t`` measured from the clock edge. The high side opens when
    ``iL + slope_comp·t`` reaches ``ipk_cmd``; if it never does, D = 1.
    ``iL_off(t)``, measured from the turn-off instant, optionally resolves
    the freewheel/idle split; without it the remainder is all freewheel.
    """
    mc = cfg.slope_comp if slope_comp is None else slope_comp
    mc = 0.0 if mc is None else mc
    t_off = _first_crossing(lambda t: peak_residual(iL_trajectory(t), t, ipk_cmd, mc), Ts)
    if t_off is None:
        return TimingSolution(D=1.0, D2=0.0, D3=0.0, Ts=Ts)
    D = t_off / Ts
    rest = Ts - t_off
    if iL_off is None or rest <= 0:
        return TimingSolution.from_fractions(D, 1.0 - D, Ts)
    t_zero = _first_crossing(lambda t: -zero_residual(iL_off(t)), rest)
    if t_zero is None:
        return TimingSolution.from_fractions(D, 1.0 - D, Ts)
    return TimingSolution.from_fractions(D, t_zero / Ts, Ts)


def burst_decision(vo: float, cfg: ControlConfig, st: ControllerState) -> BurstDecision:
    """Hysteretic skip decision, sampled at the clock edge."""
    v = vo * cfg.fb_ratio
    if v > cfg.Vref + cfg.burst_hyst:
        st.burst_active = False
    elif v < cfg.Vref - cfg.burst_hyst:
        st.burst_active = True
    return BurstDecision.RUN if st.burst_active else BurstDecision.SKIP


def off_sequence(t_off: float, Ts: float, dead_time: float) -> list[SwitchCommand]:
    """Commands from the high-side turn-off at ``t_off`` to the cycle end.

    Both switches stay off for ``dead_time`` after ``t_off`` and for the
    last ``dead_time`` of the cycle, ahead of the next high-side edge.
    """
    if t_off >= Ts:
        return []
    cmds = []
    gap_end = min(t_off + dead_time, Ts)
    low_end = Ts - dead_time
    if dead_time > 0:
        # keep a gap even when dead_time is below the resolution of t_off or Ts
        gap_end = max(gap_end, min(math.nextafter(t_off, math.inf), Ts))
        low_end = min(low_end, math.nextafter(Ts, 0.0))
    if gap_end > t_off:
        cmds.append(SwitchCommand(False, False, gap_end))
    if low_end > gap_end:
        cmds.append(SwitchCommand(False, True, low_end))
    if Ts > max(gap_end, low_end):
        cmds.append(SwitchCommand(False, False, Ts))
    return cmds


def sequence_synchronous(d_cmd: float, cfg: ControlConfig, Ts: float
                         ) -> tuple[list[SwitchCommand], bool]:
    """Complementary drive with dead time for one cycle.

    Returns the command list (times relative to the clock edge) and a
    min-on-time violation flag. A pulse shorter than two dead times is
    suppressed and flagged.
    """
    d_cmd = min(max(d_cmd, 0.0), 1.0)
    t_on = d_cmd * Ts
    violated = 0.0 < t_on < 2.0 * cfg.dead_time
    if violated:
        t_on = 0.0
    cmds = []
    if t_on > 0:
        cmds.append(SwitchCommand(True, False, t_on))
    cmds.extend(off_sequence(t_on, Ts, cfg.dead_time))
    return cmds, violated


def sequence_asynchronous(d_cmd: float, Ts: float) -> list[SwitchCommand]:
    t_on = min(max(d_cmd, 0.0), 1.0) * Ts
    cmds = []
    if t_on > 0:
        cmds.append(SwitchCommand(True, False, t_on))
    if t_on < Ts:
        cmds.append(SwitchCommand(False, False, Ts))
    return cmds


def overlaps(cmds: list[SwitchCommand]) -> bool:
    """True if any command turns both switches on at once."""
    return any(c.high_side and c.low_side for c in cmds)


def command_intervals(cmds: list[SwitchCommand], start: float = 0.0):
    """Yield ``(t_start, t_end, high_side, low_side)`` for a command list."""
    t = start
    for c in cmds:
        yield t, c.valid_until, c.high_side, c.low_side
        t = c.valid_until

