"""INI configuration: sections ``[converter]``, ``[control]`` and ``[sim]``.

Keys are the dataclass field names. Reals are written with ``repr`` so a
dump/parse round trip is exact.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, fields
from typing import Iterable, Optional

from .model import (
    BuckError,
    ControlConfig,
    ConverterParams,
    InvalidParameterError,
    Scheme,
    Topology,
    validate,
    validate_control,
)


class ConfigError(BuckError, ValueError):
    pass


@dataclass(frozen=True)
class SimSettings:
    steps_per_period: int = 256
    t_end: Optional[float] = None
    max_periods: int = 10_000
    tol: float = 1e-6
    workers: int = 1
    sweep: str = "io"
    sweep_start: float = 1e-3
    sweep_stop: float = 0.3
    sweep_points: int = 30
    sweep_spacing: str = "log"
    step_from: float = 0.0
    step_to: float = 0.3
    step_ramp: float = 2e-6


@dataclass(frozen=True)
class Config:
    params: ConverterParams
    control: ControlConfig
    sim: SimSettings


SECTIONS = {"converter": ConverterParams, "control": ControlConfig, "sim": SimSettings}
# accepted in [control] besides the field names; sets fb_ratio = Vref / Vo_target
EXTRA_KEYS = {"control": ("Vo_target",)}


def known_keys(section: str) -> set[str]:
    cls = SECTIONS[section]
    return {f.name for f in fields(cls)} | set(EXTRA_KEYS.get(section, ()))


def _parse_value(section: str, key: str, text: str, default):
    raw = text.strip()
    try:
        if key == "topology":
            return Topology(raw.lower())
        if key == "scheme":
            return Scheme(raw.lower())
        if key in ("sweep", "sweep_spacing"):
            return raw.lower()
        if raw.lower() in ("", "none"):
            if default is None:
                return None
            raise ValueError("a value is required")
        if isinstance(default, bool):
            states = configparser.ConfigParser.BOOLEAN_STATES
            if raw.lower() not in states:
                raise ValueError(f"not a boolean: {raw!r}")
            return states[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def _defaults(cls):
    return {f.name: f.default for f in fields(cls)}


def parse_config(text: str, overrides: Iterable[str] = ()) -> Config:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
    values = {name: dict(cp[name]) if cp.has_section(name) else {} for name in SECTIONS}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, field_name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if section not in SECTIONS:
            raise ConfigError(f"unknown section in override {item!r}")
        values[section][field_name] = value
    built = {}
    for section, cls in SECTIONS.items():
        allowed = known_keys(section)
        defaults = _defaults(cls)
        kwargs = {}
        extra = {}
        for key, text_value in values[section].items():
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            if key in defaults:
                kwargs[key] = _parse_value(section, key, text_value, defaults[key])
            else:
                extra[key] = _parse_value(section, key, text_value, 0.0)
        if "Vo_target" in extra:
            if extra["Vo_target"] <= 0:
                raise ConfigError("[control] Vo_target must be positive")
            kwargs["fb_ratio"] = kwargs.get("Vref", defaults["Vref"]) / extra["Vo_target"]
        built[section] = cls(**kwargs)
    params, control, sim = built["converter"], built["control"], built["sim"]
    try:
        validate(params)
        validate_control(control, params)
    except InvalidParameterError as exc:
        raise ConfigError(str(exc)) from None
    _check_sim(sim)
    return Config(params, control, sim)


def _check_sim(sim: SimSettings) -> None:
    if sim.steps_per_period < 1:
        raise ConfigError("[sim] steps_per_period must be positive")
    if sim.max_periods < 1:
        raise ConfigError("[sim] max_periods must be positive")
    if not sim.tol > 0:
        raise ConfigError("[sim] tol must be positive")
    if sim.sweep not in ("io", "vi"):
        raise ConfigError("[sim] sweep must be io or vi")
    if sim.sweep_spacing not in ("log", "lin"):
        raise ConfigError("[sim] sweep_spacing must be log or lin")
    if sim.sweep_points < 1:
        raise ConfigError("[sim] sweep_points must be positive")


def load_config(path, overrides: Iterable[str] = ()) -> Config:
    if not os.path.isfile(path):
        raise ConfigError(f"config not found: {path}")
    with open(path) as fh:
        return parse_config(fh.read(), overrides)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (Topology, Scheme)):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def dump_config(config: Config) -> str:
    lines = []
    for section, obj in (("converter", config.params), ("control", config.control),
                         ("sim", config.sim)):
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
