"""Domain types shared by the analysis, dynamics, control and engine modules."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from enum import Enum
from typing import Optional


class BuckError(Exception):
    """Base class for every error raised by buckbench."""


class InvalidParameterError(BuckError, ValueError):
    pass


class InfeasibleOperatingPoint(BuckError, ValueError):
    pass


class UnreachableTarget(BuckError, ValueError):
    pass


class ConvergenceError(BuckError, RuntimeError):
    def __init__(self, message: str, residual: float = math.nan):
        super().__init__(message)
        self.residual = residual


class SimulationDivergence(BuckError, RuntimeError):
    def __init__(self, message: str, t: float = math.nan):
        super().__init__(message)
        self.t = t


class Topology(Enum):
    ASYNCHRONOUS = "asynchronous"
    SYNCHRONOUS = "synchronous"


class ConductionState(Enum):
    ON = "On"
    OFF = "Off"
    IDLE = "Idle"


class Mode(Enum):
    CCM = "CCM"
    DCM = "DCM"
    BURST = "Burst"


class Scheme(Enum):
    OPEN_LOOP = "open_loop"
    VOLTAGE_MODE = "voltage_mode"
    CURRENT_MODE = "current_mode"
    BURST = "burst"


@dataclass(frozen=True)
class ConverterParams:
    """Power-stage parameters, SI units throughout.

    ``R`` may be ``math.inf`` to describe an unloaded output. The switching
    loss parameters (``tr``, ``tf``, ``Qg``, ``Vg``, ``soft_switching``) only
    affect efficiency bookkeeping, never the waveforms.
    """

    Vi: float = 3.6
    L: float = 10e-6
    C: float = 22e-6
    RL: float = 0.05
    RC: float = 0.01
    R: float = 6.0
    Vd: float = 0.4
    RDSon_hs: float = 0.1
    RDSon_ls: float = 0.08
    fs: float = 500e3
    Iq: float = 35e-6
    topology: Topology = Topology.SYNCHRONOUS
    tr: float = 5e-9
    tf: float = 5e-9
    Qg: float = 0.25e-9
    Vg: float = 4.0
    soft_switching: bool = False

    @property
    def Ts(self) -> float:
        return 1.0 / self.fs

    @property
    def synchronous(self) -> bool:
        return self.topology is Topology.SYNCHRONOUS

    @classmethod
    def ideal(cls, **overrides) -> "ConverterParams":
        """Lossless asynchronous stage (no drops, no ESR, no quiescent draw)."""
        base = dict(RL=0.0, RC=0.0, Vd=0.0, RDSon_hs=0.0, RDSon_ls=0.0, Iq=0.0,
                    tr=0.0, tf=0.0, Qg=0.0, topology=Topology.ASYNCHRONOUS)
        base.update(overrides)
        return cls(**base)


_POSITIVE = ("Vi", "L", "C", "R", "fs")
_NON_NEGATIVE = ("RL", "RC", "Vd", "RDSon_hs", "RDSon_ls", "Iq", "tr", "tf", "Qg", "Vg")


def validate(params: ConverterParams) -> ConverterParams:
    """Return ``params`` unchanged, or raise on the first violated invariant."""
    for name in _POSITIVE:
        value = getattr(params, name)
        if not isinstance(value, (int, float)) or math.isnan(value) or value <= 0:
            raise InvalidParameterError(f"{name} must be positive")
        # an open-circuit load is the only accepted infinity
        if math.isinf(value) and name != "R":
            raise InvalidParameterError(f"{name} must be finite")
    for name in _NON_NEGATIVE:
        value = getattr(params, name)
        if not isinstance(value, (int, float)) or math.isnan(value) or value < 0:
            raise InvalidParameterError(f"{name} must be non-negative")
        if math.isinf(value):
            raise InvalidParameterError(f"{name} must be finite")
    if not isinstance(params.topology, Topology):
        raise InvalidParameterError("topology must be a Topology")
    Ts = params.Ts
    if not (math.isfinite(Ts) and Ts > 0):
        raise InvalidParameterError("Ts must be finite and positive")
    return params


@dataclass
class PlantState:
    iL: float = 0.0
    vC: float = 0.0
    t: float = 0.0
    cond: ConductionState = ConductionState.OFF


@dataclass(frozen=True)
class TimingSolution:
    """Duty decomposition of one switching period."""

    D: float
    D2: float
    D3: float
    Ts: float

    def __post_init__(self):
        for name in ("D", "D2", "D3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)!r}")
        if abs(self.D + self.D2 + self.D3 - 1.0) > 1e-12:
            raise ValueError("D + D2 + D3 must equal 1")

    @classmethod
    def from_fractions(cls, D: float, D2: float, Ts: float) -> "TimingSolution":
        D3 = 1.0 - D - D2
        if -1e-12 < D3 < 0:
            D3 = 0.0
        return cls(D=D, D2=D2, D3=D3, Ts=Ts)

    @property
    def TON(self) -> float:
        return self.D * self.Ts

    @property
    def TOFF(self) -> float:
        return self.D2 * self.Ts


@dataclass(frozen=True)
class SteadyStateReport:
    Vo_avg: float
    dIL: float
    Ipk: float
    Io: float
    K: float
    mode: Mode
    timing: TimingSolution
    efficiency: Optional[float] = None


@dataclass(frozen=True)
class ControlConfig:
    """Modulator selection and parameters.

    ``slope_comp=None`` selects one OFF-state slope at the target output,
    ``Vo_target / L``. ``ipk_cmd`` fixes the peak-current command (the voltage
    loop is then open); ``burst_ipk`` is the minimum peak current of a burst
    pulse.
    """

    scheme: Scheme = Scheme.VOLTAGE_MODE
    duty: Optional[float] = None
    Vref: float = 1.23
    Vramp_pp: float = 10.0
    ramp_valley: float = 0.0
    kp: float = 0.5
    ki: float = 2e4
    slope_comp: Optional[float] = None
    burst_hyst: float = 0.0123
    dead_time: float = 10e-9
    fb_ratio: float = 1.23 / 1.8
    ipk_cmd: Optional[float] = None
    burst_ipk: float = 0.1
    ilimit: float = 1.0

    @property
    def Vo_target(self) -> float:
        return self.Vref / self.fb_ratio

    @classmethod
    def open_loop(cls, duty: float, **overrides) -> "ControlConfig":
        return cls(scheme=Scheme.OPEN_LOOP, duty=duty, **overrides)

    @classmethod
    def for_target(cls, Vo_target: float, **overrides) -> "ControlConfig":
        Vref = overrides.pop("Vref", 1.23)
        return cls(Vref=Vref, fb_ratio=Vref / Vo_target, **overrides)


def validate_control(cfg: ControlConfig, params: ConverterParams) -> ControlConfig:
    if not cfg.Vramp_pp > 0:
        raise InvalidParameterError("Vramp_pp must be positive")
    if not 0 < cfg.fb_ratio <= 1:
        raise InvalidParameterError("fb_ratio must lie in (0, 1]")
    if cfg.scheme is Scheme.BURST and not cfg.burst_hyst > 0:
        raise InvalidParameterError("burst_hyst must be positive")
    if not 0 <= cfg.dead_time < params.Ts / 2:
        raise InvalidParameterError("dead_time must lie in [0, Ts/2)")
    if cfg.scheme is Scheme.OPEN_LOOP:
        if cfg.duty is None or not 0 <= cfg.duty <= 1:
            raise InvalidParameterError("duty must lie in [0, 1] for open_loop")
    if cfg.kp < 0 or cfg.ki < 0:
        raise InvalidParameterError("kp and ki must be non-negative")
    if cfg.slope_comp is not None and cfg.slope_comp < 0:
        raise InvalidParameterError("slope_comp must be non-negative")
    if cfg.ilimit <= 0:
        raise InvalidParameterError("ilimit must be positive")
    return cfg


def field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]
