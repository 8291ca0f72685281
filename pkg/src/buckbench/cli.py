"""``buckbench`` command-line front end."""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import analysis, engine
from .config import Config, ConfigError, load_config
from .model import (
    BuckError,
    ConvergenceError,
    InfeasibleOperatingPoint,
    InvalidParameterError,
    SimulationDivergence,
    UnreachableTarget,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
COMMANDS = ("analyze", "sim", "sweep", "step")


@dataclass
class RunSpec:
    command: str
    config_path: str
    overrides: list[str] = field(default_factory=list)
    output_dir: str = "."


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"{self.prog}: error: {message}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="buckbench",
                     description="Buck converter analysis and switched simulation.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, metavar="PATH")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value")
    parser.add_argument("--out", default=".", metavar="DIR",
                        help="output directory (created if missing)")
    return parser


def _out_path(spec: RunSpec, name: str) -> str:
    os.makedirs(spec.output_dir, exist_ok=True)
    return os.path.join(spec.output_dir, name)


def _print_rows(rows) -> None:
    for key, value in rows:
        if isinstance(value, float):
            print(f"{key:>16}: {value:.6g}")
        else:
            print(f"{key:>16}: {getattr(value, 'value', value)}")


def _summary(m: engine.Metrics) -> list:
    keys = ("Vo_avg", "Vo_ripple_pp", "iL_ripple_pp", "Ipk", "Io", "efficiency", "mode",
            "load_regulation", "line_regulation", "settle_time")
    return [(k, getattr(m, k)) for k in keys]


def cmd_analyze(spec: RunSpec, cfg: Config) -> int:
    p, ctl = cfg.params, cfg.control
    D = ctl.duty if ctl.duty is not None else analysis.duty_for_vo(p, ctl.Vo_target)
    rep = analysis.steady_state(p, D)
    rows = [("mode", rep.mode.value), ("Vo_avg", rep.Vo_avg), ("dIL", rep.dIL),
            ("Ipk", rep.Ipk), ("Io", rep.Io), ("K", rep.K), ("D", rep.timing.D),
            ("D2", rep.timing.D2), ("D3", rep.timing.D3), ("TON", rep.timing.TON),
            ("TOFF", rep.timing.TOFF)]
    _print_rows(rows)
    engine.write_rows_csv(rows, _out_path(spec, "analysis.csv"))
    return EXIT_OK


def _last_full_cycle(trace: engine.Trace) -> engine.Trace:
    cyc = trace.cycles
    Ts = cyc[1].t0 - cyc[0].t0 if len(cyc) > 1 else trace.duration
    full = [c for c in cyc if c.t0 + Ts <= trace.t[-1] * (1 + 1e-12)]
    c = full[-1]
    sel = (trace.t >= c.t0) & (trace.t <= c.t0 + Ts * (1 + 1e-12))
    idx = np.nonzero(sel)[0]
    sl = slice(idx[0], idx[-1] + 1)
    return engine.Trace(t=trace.t[sl], iL=trace.iL[sl], vC=trace.vC[sl], vo=trace.vo[sl],
                        phase=trace.phase[sl], duty=trace.duty[sl], R=trace.R[sl],
                        cycles=[c], sample_period=trace.sample_period)


def cmd_sim(spec: RunSpec, cfg: Config) -> int:
    p, ctl, s = cfg.params, cfg.control, cfg.sim
    if s.t_end is not None:
        # start-up transient from rest
        if s.t_end < p.Ts:
            raise InvalidParameterError("t_end too small: must cover at least one period")
        trace = engine.simulate(p, ctl, s.t_end, steps_per_period=s.steps_per_period)
        metrics = engine.measure(_last_full_cycle(trace), p, ctl)
    else:
        trace, metrics = engine.run_to_steady_state(
            p, ctl, steps_per_period=s.steps_per_period, tol=s.tol, max_periods=s.max_periods)
    _print_rows(_summary(metrics))
    engine.write_trace_csv(trace, _out_path(spec, "trace.csv"))
    engine.write_metrics_csv(metrics, _out_path(spec, "metrics.csv"))
    return EXIT_OK


def sweep_grid(s) -> np.ndarray:
    if s.sweep_points == 1:
        return np.array([s.sweep_start])
    if s.sweep_spacing == "log":
        if s.sweep_start <= 0 or s.sweep_stop <= 0:
            raise ConfigError("log sweep needs positive endpoints")
        return np.geomspace(s.sweep_start, s.sweep_stop, s.sweep_points)
    return np.linspace(s.sweep_start, s.sweep_stop, s.sweep_points)


def cmd_sweep(spec: RunSpec, cfg: Config) -> int:
    s = cfg.sim
    result = engine.sweep(cfg.params, cfg.control, s.sweep, sweep_grid(s), workers=s.workers,
                          steps_per_period=s.steps_per_period, tol=s.tol,
                          max_periods=s.max_periods)
    for i, row in enumerate(result.rows):
        flag = "  FAILED: " + row["error"] if row["failed"] else ""
        print(f"{i:3d} {s.sweep}={row[s.sweep]:.6g} Vo_avg={row['Vo_avg']:.6g} "
              f"efficiency={row['efficiency']:.6g} mode={row['mode']}{flag}")
    if s.sweep == "vi":
        print(f"line_regulation: {result.line_regulation * 1e3:.6g} mV/V")
    engine.write_sweep_csv(result, _out_path(spec, "sweep.csv"))
    return EXIT_OK


def cmd_step(spec: RunSpec, cfg: Config) -> int:
    s = cfg.sim
    trace, metrics = engine.load_step(cfg.params, cfg.control, s.step_from, s.step_to,
                                      s.step_ramp, steps_per_period=s.steps_per_period,
                                      tol=s.tol, max_periods=s.max_periods)
    _print_rows(_summary(metrics))
    if not math.isnan(metrics.load_regulation):
        print(f"load_regulation: {metrics.load_regulation * 1e3:.6g} mV/A")
    engine.write_trace_csv(trace, _out_path(spec, "step.csv"))
    engine.write_metrics_csv(metrics, _out_path(spec, "metrics.csv"))
    return EXIT_OK


HANDLERS = {"analyze": cmd_analyze, "sim": cmd_sim, "sweep": cmd_sweep, "step": cmd_step}


def run(spec: RunSpec) -> int:
    try:
        cfg = load_config(spec.config_path, spec.overrides)
        return HANDLERS[spec.command](spec, cfg)
    except (ConfigError, InvalidParameterError, UnreachableTarget,
            InfeasibleOperatingPoint) as exc:
        print(f"buckbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConvergenceError, SimulationDivergence) as exc:
        print(f"buckbench: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except BuckError as exc:
        print(f"buckbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return EXIT_OK
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
        return EXIT_USAGE
    spec = RunSpec(command=args.command, config_path=args.config,
                   overrides=list(args.overrides), output_dir=args.out)
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
