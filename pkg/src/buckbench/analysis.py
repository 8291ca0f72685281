"""Closed-form steady-state relations for the buck power stage.

CCM results include the switch, inductor and diode drops; DCM results use
the lossless stage (drops set to zero), so lossy DCM operating points are
left to the simulator.
"""

from __future__ import annotations

import math

from .model import (
    ConverterParams,
    InfeasibleOperatingPoint,
    Mode,
    SteadyStateReport,
    TimingSolution,
    UnreachableTarget,
)


def _check_duty(D: float) -> None:
    if not 0.0 <= D <= 1.0:
        raise ValueError(f"duty cycle must lie in [0, 1], got {D!r}")


def vo_ccm_fixed_il(params: ConverterParams, D: float, IL: float) -> float:
    """Output voltage for a given average inductor current (no closure)."""
    _check_duty(D)
    vds = IL * params.RDSon_hs
    return (params.Vi - vds) * D - params.Vd * (1.0 - D) - IL * params.RL


def vo_ccm_lossy(params: ConverterParams, D: float) -> float:
    """CCM output voltage with the average inductor current closed as ``Vo/R``."""
    _check_duty(D)
    rhs = params.Vi * D - params.Vd * (1.0 - D)
    if rhs <= 0.0:
        return 0.0
    return rhs / (1.0 + (params.RL + D * params.RDSon_hs) / params.R)


def vo_ccm_ideal(Vi: float, D: float) -> float:
    _check_duty(D)
    return Vi * D


def ripple_on(params: ConverterParams, D: float, IL: float, vo: float | None = None) -> float:
    """Inductor current rise over the ON interval.

    ``vo`` defaults to the CCM output voltage at the same average current
    ``IL``, which makes ``ripple_on == ripple_off`` for every ``IL``.
    """
    _check_duty(D)
    if D == 0.0:
        return 0.0
    if vo is None:
        vo = vo_ccm_fixed_il(params, D, IL)
    applied = params.Vi - IL * params.RDSon_hs - IL * params.RL - vo
    if applied < 0.0:
        raise InfeasibleOperatingPoint(
            f"non-positive inductor voltage during ON ({applied:.6g} V)")
    return applied * D * params.Ts / params.L


def ripple_off(params: ConverterParams, D: float, IL: float, vo: float | None = None) -> float:
    _check_duty(D)
    if vo is None:
        vo = vo_ccm_fixed_il(params, D, IL)
    return (vo + params.Vd + IL * params.RL) * (1.0 - D) * params.Ts / params.L


def duty_for_vo(params: ConverterParams, Vo_target: float) -> float:
    """Invert the lossy CCM relation for the duty cycle."""
    num = Vo_target * (1.0 + params.RL / params.R) + params.Vd
    den = params.Vi - Vo_target * params.RDSon_hs / params.R + params.Vd
    if den <= 0.0:
        raise UnreachableTarget(f"Vo_target={Vo_target} V is unreachable")
    D = num / den
    if not 0.0 <= D <= 1.0:
        raise UnreachableTarget(
            f"Vo_target={Vo_target} V needs D={D:.6g}, outside [0, 1]")
    return D


def k_param(params: ConverterParams) -> float:
    return 2.0 * params.L / (params.R * params.Ts)


def conduction_mode(params: ConverterParams, D: float) -> Mode:
    # K == 1 - D is classified CCM; both conversion formulas agree there
    return Mode.DCM if k_param(params) < 1.0 - D else Mode.CCM


def vo_dcm(params: ConverterParams, D: float) -> float:
    _check_duty(D)
    if D == 0.0:
        return 0.0
    K = k_param(params)
    return params.Vi * 2.0 / (1.0 + math.sqrt(1.0 + 4.0 * K / (D * D)))


def vo_from_timing(Vi: float, D: float, D2: float) -> float:
    """Volt-second balance of the lossless DCM cycle: ``Vi·D/(D + D2)``."""
    return Vi * D / (D + D2)


def dcm_timing(params: ConverterParams, D: float) -> TimingSolution:
    Ts = params.Ts
    if D == 0.0:
        return TimingSolution(D=0.0, D2=0.0, D3=1.0, Ts=Ts)
    vo = vo_dcm(params, D)
    D2 = D * (params.Vi - vo) / vo
    # floating-point guard at the mode boundary where D2 -> 1 - D
    D2 = min(D2, 1.0 - D)
    return TimingSolution.from_fractions(D, D2, Ts)


def dcm_peak_and_current(params: ConverterParams, D: float) -> tuple[float, float]:
    """Peak inductor current and average output current of a DCM cycle."""
    if D == 0.0:
        return 0.0, 0.0
    vo = vo_dcm(params, D)
    timing = dcm_timing(params, D)
    ipk = (params.Vi - vo) * D * params.Ts / params.L
    io = 0.5 * ipk * (timing.D + timing.D2)
    return ipk, io


def steady_state(params: ConverterParams, D: float) -> SteadyStateReport:
    _check_duty(D)
    K = k_param(params)
    Ts = params.Ts
    if D == 0.0:
        return SteadyStateReport(Vo_avg=0.0, dIL=0.0, Ipk=0.0, Io=0.0, K=K, mode=Mode.DCM,
                                 timing=TimingSolution(0.0, 0.0, 1.0, Ts))
    if D == 1.0 or conduction_mode(params, D) is Mode.CCM:
        vo = vo_ccm_lossy(params, D)
        io = vo / params.R
        dil = ripple_on(params, D, io)
        timing = TimingSolution.from_fractions(D, 1.0 - D, Ts)
        return SteadyStateReport(Vo_avg=vo, dIL=dil, Ipk=io + 0.5 * dil, Io=io, K=K,
                                 mode=Mode.CCM, timing=timing)
    vo = vo_dcm(params, D)
    ipk, io = dcm_peak_and_current(params, D)
    timing = dcm_timing(params, D)
    mode = Mode.DCM if timing.D3 > 0 else Mode.CCM
    return SteadyStateReport(Vo_avg=vo, dIL=ipk, Ipk=ipk, Io=io, K=K, mode=mode, timing=timing)
