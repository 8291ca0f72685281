"""State equations of the switched power stage.

State is ``(iL, vC)``: inductor current and the capacitor voltage behind the
ESR. The terminal voltage ``vo`` is an algebraic output. Every helper that
takes ``iL``/``vC`` also accepts numpy arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

from .model import ConductionState, ConverterParams, InvalidParameterError, PlantState, Topology


class Phase(IntEnum):
    """Which element carries the inductor current.

    Finer than ConductionState: the freewheel path may be the low-side
    switch, the catch/body diode, or (during synchronous dead time with
    negative current) the high-side body diode.
    """

    HIGH = 0
    LOW = 1
    DIODE = 2
    REVERSE_DIODE = 3
    IDLE = 4


COND_OF_PHASE = {
    Phase.HIGH: ConductionState.ON,
    Phase.LOW: ConductionState.OFF,
    Phase.DIODE: ConductionState.OFF,
    Phase.REVERSE_DIODE: ConductionState.OFF,
    Phase.IDLE: ConductionState.IDLE,
}


@dataclass(frozen=True)
class Derivative:
    diL_dt: float
    dvC_dt: float


def output_voltage_of(iL, vC, params: ConverterParams, R: float | None = None):
    R = params.R if R is None else R
    return (vC + params.RC * iL) / (1.0 + params.RC / R)


def output_voltage(state: PlantState, params: ConverterParams) -> float:
    iL = 0.0 if state.cond is ConductionState.IDLE else state.iL
    return output_voltage_of(iL, state.vC, params)


def switch_node_voltage(phase: Phase, params: ConverterParams) -> float:
    if phase is Phase.HIGH:
        return params.Vi
    if phase is Phase.DIODE:
        return -params.Vd
    if phase is Phase.REVERSE_DIODE:
        return params.Vi + params.Vd
    return 0.0


def series_resistance(phase: Phase, params: ConverterParams) -> float:
    if phase is Phase.HIGH:
        return params.RDSon_hs + params.RL
    if phase is Phase.LOW:
        return params.RDSon_ls + params.RL
    return params.RL


def inductor_voltage(phase: Phase, iL, vC, params: ConverterParams, R: float | None = None):
    """``L·diL/dt`` for the given conduction path (zero when idle)."""
    if phase is Phase.IDLE:
        return 0.0 * vC
    vo = output_voltage_of(iL, vC, params, R)
    return switch_node_voltage(phase, params) - iL * series_resistance(phase, params) - vo


def capacitor_current(phase: Phase, iL, vC, params: ConverterParams, R: float | None = None):
    R = params.R if R is None else R
    if phase is Phase.IDLE:
        iL = 0.0 * iL
    return iL - output_voltage_of(iL, vC, params, R) / R


def slopes(phase: Phase, iL, vC, params: ConverterParams, R: float | None = None):
    """``(diL/dt, dvC/dt)`` in the given phase."""
    return (inductor_voltage(phase, iL, vC, params, R) / params.L,
            capacitor_current(phase, iL, vC, params, R) / params.C)


def phase_of(cond: ConductionState, topology: Topology, iL: float = 0.0, *,
             dead_time: bool = False, burst_skip: bool = False) -> Phase:
    """Map a conduction state onto the element carrying the current."""
    if cond is ConductionState.ON:
        return Phase.HIGH
    if cond is ConductionState.IDLE:
        if topology is Topology.SYNCHRONOUS and not (burst_skip or dead_time):
            raise InvalidParameterError(
                "Idle is only reachable in a synchronous stage during burst skip or dead time")
        return Phase.IDLE
    if topology is Topology.ASYNCHRONOUS:
        if iL < 0:
            raise InvalidParameterError("asynchronous stage cannot carry negative current")
        return Phase.DIODE
    if dead_time:
        return Phase.REVERSE_DIODE if iL < 0 else Phase.DIODE
    return Phase.LOW


def derivative(state: PlantState, params: ConverterParams, *, dead_time: bool = False,
               burst_skip: bool = False) -> Derivative:
    phase = phase_of(state.cond, params.topology, state.iL, dead_time=dead_time,
                     burst_skip=burst_skip)
    diL, dvC = slopes(phase, state.iL, state.vC, params)
    return Derivative(float(diL), float(dvC))


def zero_residual(iL):
    """Residual of the inductor-current zero crossing."""
    return iL


def peak_residual(iL, t_in_cycle, ipk_cmd: float, slope_comp: float = 0.0):
    """Residual of the peak-current comparator; trips when it reaches zero."""
    return iL + slope_comp * t_in_cycle - ipk_cmd


def event_functions(state: PlantState, params: ConverterParams, ipk_cmd: float = math.inf,
                    slope_comp: float = 0.0, t_in_cycle: float = 0.0) -> list[float]:
    """Residuals ``[zero crossing, peak-current trip]`` for ``state``."""
    return [zero_residual(state.iL), peak_residual(state.iL, t_in_cycle, ipk_cmd, slope_comp)]


def affine_model(phase: Phase, params: ConverterParams, R: float | None = None):
    """``(A, b)`` with ``d[iL, vC]/dt = A @ [iL, vC] + b`` in ``phase``.

    Obtained by probing :func:`slopes`, which is affine within a phase.
    """
    f0 = slopes(phase, 0.0, 0.0, params, R)
    fi = slopes(phase, 1.0, 0.0, params, R)
    fv = slopes(phase, 0.0, 1.0, params, R)
    A = ((fi[0] - f0[0], fv[0] - f0[0]),
         (fi[1] - f0[1], fv[1] - f0[1]))
    return A, (f0[0], f0[1])
