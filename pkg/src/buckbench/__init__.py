"""Buck DC-DC converter analysis and switched-waveform simulation."""

from .analysis import (
    conduction_mode,
    dcm_timing,
    duty_for_vo,
    k_param,
    ripple_off,
    ripple_on,
    steady_state,
    vo_ccm_fixed_il,
    vo_ccm_ideal,
    vo_ccm_lossy,
    vo_dcm,
)
from .engine import (
    Metrics,
    Simulator,
    SweepResult,
    Trace,
    load_step,
    measure,
    measure_efficiency,
    run_to_steady_state,
    simulate,
    sweep,
)
from .model import (
    BuckError,
    ConductionState,
    ControlConfig,
    ConvergenceError,
    ConverterParams,
    InfeasibleOperatingPoint,
    InvalidParameterError,
    Mode,
    PlantState,
    Scheme,
    SimulationDivergence,
    TimingSolution,
    Topology,
    UnreachableTarget,
    validate,
)

__version__ = "0.1.0"
