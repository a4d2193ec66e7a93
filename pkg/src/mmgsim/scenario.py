"""Declarative experiment definitions.

Scenario files are strict TOML: unknown keys are rejected so a typo in a
coefficient name fails loudly instead of silently using a default.  Units are
encoded in key names (``filter_l_mh``), and values that required an
interpretation call are recorded alongside the interpreted form so
:func:`validate_physics` can surface them.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import tomli

from .metrics import CHANNELS

TWO_PI = 2.0 * math.pi
SCHEMA = "mmgsim-scenario-v1"

EVENT_ACTIONS = ("enable_mrdc", "disable_mrdc", "load_step", "set_p_mppt")


class ValidationError(ValueError):
    """Scenario fails schema or invariant checks; message names the field."""


def _positive(x):
    return x > 0


def _nonzero(x):
    return x != 0


def _nonnegative(x):
    return x >= 0


@dataclass(frozen=True)
class RunSettings:
    duration_s: float = 2.5
    dt_plant_us: float = 15.0
    dt_control_us: float = 15.0
    startup_ramp_s: float = 0.1


@dataclass(frozen=True)
class SystemSettings:
    frequency_hz: float = 60.0
    frequency_as_printed_rad_s: float | None = None
    v_nominal_rms: float = 120.0

    @property
    def omega(self) -> float:
        return TWO_PI * self.frequency_hz

    @property
    def v_nominal_peak(self) -> float:
        return self.v_nominal_rms * math.sqrt(2.0)


@dataclass(frozen=True)
class EssSettings:
    filter_l_mh: float = 1.5
    filter_c_uf: float = 100.0
    dc_link_v: float = 300.0
    v_ref_rms: float = 120.0
    p_mppt_w: float = 3000.0
    stage: str = "pr_bridge"  # or "ideal_current"


@dataclass(frozen=True)
class PrSettings:
    k_p: float = 40.0
    omega_c_rad_s: float = 1.0
    resonant_harmonics: tuple[int, ...] = (1, 3)
    resonant_gains: tuple[float, ...] = (1000.0, 50.0)


@dataclass(frozen=True)
class ControlSettings:
    n_r: float = 0.067
    n_r_unit: str = "rad_per_s_per_kw"  # or "rad_per_s_per_w" (as printed)
    m_r: float = -0.8e-2
    d_r: float = -25e-6
    c_r: float = -2.85e-4
    qs_sign: int = 1
    lpf_cutoff_hz: float = 5.0
    magnitude_lpf_hz: float = 2.0
    ref_slew_a_per_s: float = 60.0
    undervoltage_floor_frac: float = 0.1
    power_consistent: bool = False
    forward_q_ref_to_pv: bool = False
    pr: PrSettings = field(default_factory=PrSettings)

    @property
    def n_r_si(self) -> float:
        """Reverse-droop slope in (rad/s)/W regardless of the declared unit."""
        return self.n_r / 1000.0 if self.n_r_unit == "rad_per_s_per_kw" else self.n_r


@dataclass(frozen=True)
class PvThreePhaseSettings:
    rating_w: float = 12000.0
    filter_l_mh: float = 1.5
    filter_c_uf: float = 100.0
    freq_sag_at_rated_frac: float = 0.005
    volt_sag_at_rated_frac: float = 0.02
    loading_at_w_ref: float = 0.9427
    feeder_r_ohm: float = 0.10
    feeder_l_mh: float = 0.60


@dataclass(frozen=True)
class PvSinglePhaseSettings:
    rating_w: float = 3000.0
    filter_l_mh: float = 1.5
    filter_c_uf: float = 100.0
    freq_sag_at_rated_frac: float = 0.005
    volt_sag_at_rated_frac: float = 0.05
    loading_at_w_ref: float = 0.9427


@dataclass(frozen=True)
class Mg2Settings:
    feeder_r_ohm: float = 0.05
    feeder_l_mh: float = 0.10
    load_ohm: float | None = 20.0


@dataclass(frozen=True)
class LoadSettings:
    three_phase_total_w: float = 10500.0


@dataclass(frozen=True)
class OutputSettings:
    decimate: int = 10
    summary_window_s: float = 0.3
    summary_tol: float = 0.02
    channels: tuple[str, ...] = ("all",)


@dataclass(frozen=True)
class Event:
    time_s: float
    action: str
    node: str | None = None
    ohms: float | None = None
    watts: float | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    run: RunSettings = field(default_factory=RunSettings)
    system: SystemSettings = field(default_factory=SystemSettings)
    ess: EssSettings | None = field(default_factory=EssSettings)
    control: ControlSettings = field(default_factory=ControlSettings)
    pv_three_phase: PvThreePhaseSettings = field(default_factory=PvThreePhaseSettings)
    pv_single_phase: PvSinglePhaseSettings | None = field(default_factory=PvSinglePhaseSettings)
    mg2: Mg2Settings | None = field(default_factory=Mg2Settings)
    loads: LoadSettings = field(default_factory=LoadSettings)
    outputs: OutputSettings = field(default_factory=OutputSettings)
    events: tuple[Event, ...] = ()

    @property
    def dt_plant_s(self) -> float:
        return self.run.dt_plant_us * 1e-6

    @property
    def dt_control_s(self) -> float:
        return self.run.dt_control_us * 1e-6

    def hash(self) -> str:
        return hashlib.sha256(serialize_scenario(self).encode()).hexdigest()[:16]


# -- schema-driven parsing ---------------------------------------------------

# field name -> (types, constraint, constraint description)
_CONSTRAINTS = {
    ("run", "duration_s"): (_positive, "must be > 0"),
    ("run", "dt_plant_us"): (_positive, "must be > 0"),
    ("run", "dt_control_us"): (_positive, "must be > 0"),
    ("run", "startup_ramp_s"): (_nonnegative, "must be >= 0"),
    ("system", "frequency_hz"): (_positive, "must be > 0"),
    ("system", "v_nominal_rms"): (_positive, "must be > 0"),
    ("ess", "filter_l_mh"): (_positive, "must be > 0"),
    ("ess", "filter_c_uf"): (_positive, "must be > 0"),
    ("ess", "dc_link_v"): (_positive, "must be > 0"),
    ("ess", "v_ref_rms"): (_positive, "must be > 0"),
    ("ess", "stage"): (lambda s: s in ("pr_bridge", "ideal_current"),
                       "must be 'pr_bridge' or 'ideal_current'"),
    ("control", "n_r"): (_nonzero, "must be nonzero"),
    ("control", "m_r"): (_nonzero, "must be nonzero"),
    ("control", "d_r"): (_nonzero, "must be nonzero"),
    ("control", "c_r"): (_nonzero, "must be nonzero"),
    ("control", "qs_sign"): (lambda s: s in (1, -1), "must be +1 or -1"),
    ("control", "n_r_unit"): (lambda s: s in ("rad_per_s_per_kw", "rad_per_s_per_w"),
                              "must be 'rad_per_s_per_kw' or 'rad_per_s_per_w'"),
    ("control", "lpf_cutoff_hz"): (_positive, "must be > 0"),
    ("control", "magnitude_lpf_hz"): (_positive, "must be > 0"),
    ("control", "ref_slew_a_per_s"): (_positive, "must be > 0"),
    ("control", "undervoltage_floor_frac"): (_positive, "must be > 0"),
    ("pr", "k_p"): (_positive, "must be > 0"),
    ("pr", "omega_c_rad_s"): (_positive, "must be > 0"),
    ("pv_three_phase", "rating_w"): (_positive, "must be > 0"),
    ("pv_three_phase", "filter_l_mh"): (_positive, "must be > 0"),
    ("pv_three_phase", "filter_c_uf"): (_positive, "must be > 0"),
    ("pv_three_phase", "feeder_r_ohm"): (_positive, "must be > 0"),
    ("pv_three_phase", "feeder_l_mh"): (_positive, "must be > 0"),
    ("pv_single_phase", "rating_w"): (_positive, "must be > 0"),
    ("pv_single_phase", "filter_l_mh"): (_positive, "must be > 0"),
    ("pv_single_phase", "filter_c_uf"): (_positive, "must be > 0"),
    ("mg2", "feeder_r_ohm"): (_positive, "must be > 0"),
    ("mg2", "load_ohm"): (_positive, "must be > 0"),
    ("mg2", "feeder_l_mh"): (_positive, "must be > 0"),
    ("loads", "three_phase_total_w"): (_positive, "must be > 0"),
    ("outputs", "decimate"): (lambda n: n >= 1, "must be >= 1"),
    ("outputs", "summary_window_s"): (_positive, "must be > 0"),
    ("outputs", "summary_tol"): (_positive, "must be > 0"),
}

def _coerce(section: str, name: str, value, target_type):
    if target_type is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if target_type is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if target_type is bool and isinstance(value, bool):
        return value
    if target_type is str and isinstance(value, str):
        return value
    raise ValidationError(f"{section}.{name}: expected {target_type.__name__}, "
                          f"got {type(value).__name__}")


def _parse_section(section_name: str, cls, data: dict):
    spec = {f.name: f for f in fields(cls)}
    out = {}
    for key, value in data.items():
        if key not in spec:
            raise ValidationError(f"unknown key {section_name}.{key}")
        f = spec[key]
        if key == "pr":
            if not isinstance(value, dict):
                raise ValidationError("control.pr: expected a table")
            out[key] = _parse_section("control.pr", PrSettings, value)
            continue
        if f.type.startswith("tuple[int"):
            if not isinstance(value, list) or not all(
                    isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ValidationError(f"{section_name}.{key}: expected an integer array")
            out[key] = tuple(value)
        elif f.type.startswith("tuple[float"):
            if not isinstance(value, list) or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise ValidationError(f"{section_name}.{key}: expected a float array")
            out[key] = tuple(float(v) for v in value)
        elif f.type.startswith("tuple[str"):
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ValidationError(f"{section_name}.{key}: expected a string array")
            out[key] = tuple(value)
        elif f.type.startswith("float | None"):
            out[key] = None if value is None else _coerce(section_name, key, value, float)
        elif f.type.startswith("float"):
            out[key] = _coerce(section_name, key, value, float)
        elif f.type.startswith("int"):
            out[key] = _coerce(section_name, key, value, int)
        elif f.type.startswith("bool"):
            out[key] = _coerce(section_name, key, value, bool)
        elif f.type.startswith("str"):
            out[key] = _coerce(section_name, key, value, str)
        else:
            raise ValidationError(f"{section_name}.{key}: unsupported field")
    cfg = cls(**out)
    short = section_name.split(".")[-1]
    for key in spec:
        val = getattr(cfg, key)
        if (short, key) in _CONSTRAINTS and val is not None:
            check, msg = _CONSTRAINTS[(short, key)]
            if not check(val):
                raise ValidationError(f"{section_name}.{key} {msg} (got {val})")
    return cfg


def _parse_event(idx: int, data: dict) -> Event:
    allowed = {"time_s", "action", "node", "ohms", "watts"}
    for key in data:
        if key not in allowed:
            raise ValidationError(f"unknown key events[{idx}].{key}")
    if "time_s" not in data or "action" not in data:
        raise ValidationError(f"events[{idx}]: time_s and action are required")
    action = data["action"]
    if action not in EVENT_ACTIONS:
        raise ValidationError(f"events[{idx}].action must be one of {EVENT_ACTIONS}")
    ev = Event(time_s=float(data["time_s"]), action=action,
               node=data.get("node"), ohms=data.get("ohms"),
               watts=data.get("watts"))
    if action == "load_step" and (ev.node is None or ev.ohms is None):
        raise ValidationError(f"events[{idx}]: load_step requires node and ohms")
    if action == "load_step" and ev.ohms <= 0:
        raise ValidationError(f"events[{idx}].ohms must be > 0")
    if action == "set_p_mppt" and ev.watts is None:
        raise ValidationError(f"events[{idx}]: set_p_mppt requires watts")
    return ev


_SECTIONS = {
    "run": (RunSettings, False),
    "system": (SystemSettings, False),
    "ess": (EssSettings, True),
    "control": (ControlSettings, False),
    "pv_three_phase": (PvThreePhaseSettings, False),
    "pv_single_phase": (PvSinglePhaseSettings, True),
    "mg2": (Mg2Settings, True),
    "loads": (LoadSettings, False),
    "outputs": (OutputSettings, False),
}


def scenario_from_dict(raw: dict) -> ScenarioConfig:
    """Validate a raw TOML mapping into a config; strict about unknown keys."""
    known = set(_SECTIONS) | {"schema", "events"}
    for key in raw:
        if key not in known:
            raise ValidationError(f"unknown section [{key}]")
    if raw.get("schema", SCHEMA) != SCHEMA:
        raise ValidationError(f"schema must be {SCHEMA!r}")

    parts = {}
    for name, (cls, optional) in _SECTIONS.items():
        if name in raw:
            if raw[name] is None and optional:
                parts[name] = None
            else:
                if not isinstance(raw[name], dict):
                    raise ValidationError(f"[{name}] must be a table")
                parts[name] = _parse_section(name, cls, raw[name])
        elif optional:
            parts[name] = None
        else:
            parts[name] = cls()

    events = []
    for idx, ev in enumerate(raw.get("events", [])):
        if not isinstance(ev, dict):
            raise ValidationError(f"events[{idx}] must be a table")
        events.append(_parse_event(idx, ev))

    cfg = ScenarioConfig(events=tuple(events), **parts)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: ScenarioConfig):
    ratio = cfg.run.dt_control_us / cfg.run.dt_plant_us
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ValidationError(
            f"run.dt_control_us must be an integer multiple of run.dt_plant_us "
            f"(got ratio {ratio:.6g})")
    last = 0.0
    for idx, ev in enumerate(cfg.events):
        if not 0.0 <= ev.time_s <= cfg.run.duration_s:
            raise ValidationError(
                f"events[{idx}].time_s outside [0, duration]")
        if ev.time_s < last:
            raise ValidationError("events must be sorted by time")
        last = ev.time_s
        if ev.action == "load_step" and ev.node not in ("mg2", "pcc_a", "pcc_b", "pcc_c"):
            raise ValidationError(f"events[{idx}].node must be a load bus name")
    pr = cfg.control.pr
    if len(pr.resonant_harmonics) != len(pr.resonant_gains):
        raise ValidationError("control.pr resonant arrays must have equal length")
    if len(set(pr.resonant_harmonics)) != len(pr.resonant_harmonics) or any(
            k < 1 for k in pr.resonant_harmonics):
        raise ValidationError("control.pr.resonant_harmonics must be distinct and >= 1")
    for ch in cfg.outputs.channels:
        if ch != "all" and ch not in CHANNELS:
            raise ValidationError(f"outputs.channels: unknown channel {ch!r}")
    if cfg.ess is not None and cfg.mg2 is None:
        raise ValidationError("[ess] requires the [mg2] section")
    if cfg.pv_single_phase is not None and cfg.mg2 is None:
        raise ValidationError("[pv_single_phase] requires the [mg2] section")


def load_scenario(path) -> ScenarioConfig:
    """Load and validate a scenario file.  Parse errors keep tomli's
    line/column message; validation errors name the offending field."""
    path = Path(path)
    with open(path, "rb") as f:
        raw = tomli.load(f)
    return scenario_from_dict(raw)


def validate_physics(cfg: ScenarioConfig) -> list[str]:
    """Flag suspicious-but-legal values.  Returns warning strings."""
    warnings = []
    sys_ = cfg.system
    if sys_.frequency_as_printed_rad_s is not None:
        if abs(sys_.frequency_as_printed_rad_s - sys_.omega) > 1e-6:
            warnings.append(
                f"system frequency printed as {sys_.frequency_as_printed_rad_s:g} rad/s "
                f"but interpreted as {sys_.frequency_hz:g} Hz "
                f"({sys_.omega:.4g} rad/s); keys record both")
    if cfg.pv_three_phase.loading_at_w_ref > 1.0:
        warnings.append("pv_three_phase.loading_at_w_ref > 1: unit above rating "
                        "at nominal frequency")
    if cfg.pv_single_phase is not None and cfg.pv_single_phase.loading_at_w_ref > 1.0:
        warnings.append("pv_single_phase.loading_at_w_ref > 1: unit above rating "
                        "at nominal frequency")
    if cfg.run.dt_plant_us > 100.0:
        warnings.append("run.dt_plant_us > 100 us: coarse for 60 Hz transients")
    return warnings


# -- serialization -----------------------------------------------------------

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)}")


def _emit_section(name: str, obj, lines: list[str]):
    lines.append(f"[{name}]")
    for f in fields(obj):
        val = getattr(obj, f.name)
        if val is None:
            continue
        if f.name == "pr":
            continue
        lines.append(f"{f.name} = {_toml_value(val)}")
    lines.append("")


def serialize_scenario(cfg: ScenarioConfig) -> str:
    """Canonical TOML form; reparsing yields an identical config."""
    lines = [f'schema = "{SCHEMA}"', ""]
    _emit_section("run", cfg.run, lines)
    _emit_section("system", cfg.system, lines)
    if cfg.ess is not None:
        _emit_section("ess", cfg.ess, lines)
    _emit_section("control", cfg.control, lines)
    _emit_section("control.pr", cfg.control.pr, lines)
    _emit_section("pv_three_phase", cfg.pv_three_phase, lines)
    if cfg.pv_single_phase is not None:
        _emit_section("pv_single_phase", cfg.pv_single_phase, lines)
    if cfg.mg2 is not None:
        _emit_section("mg2", cfg.mg2, lines)
    _emit_section("loads", cfg.loads, lines)
    _emit_section("outputs", cfg.outputs, lines)
    for ev in cfg.events:
        lines.append("[[events]]")
        lines.append(f"time_s = {_toml_value(ev.time_s)}")
        lines.append(f"action = {_toml_value(ev.action)}")
        if ev.node is not None:
            lines.append(f"node = {_toml_value(ev.node)}")
        if ev.ohms is not None:
            lines.append(f"ohms = {_toml_value(ev.ohms)}")
        if ev.watts is not None:
            lines.append(f"watts = {_toml_value(ev.watts)}")
        lines.append("")
    return "\n".join(lines)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings onto a raw scenario mapping.

    Values parse as TOML literals, so numbers, booleans and quoted strings all
    work from the command line.
    """
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, _, literal = item.partition("=")
        path = key.strip().split(".")
        if len(path) < 2:
            raise ValidationError(f"override key {key!r} must be section.key")
        try:
            value = tomli.loads(f"v = {literal.strip()}")["v"]
        except tomli.TOMLDecodeError as exc:
            raise ValidationError(f"override {item!r}: bad value ({exc})") from exc
        node = out
        for part in path[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = {}
            elif isinstance(nxt, dict):
                nxt = dict(nxt)
            else:
                raise ValidationError(f"override {key!r}: {part} is not a table")
            node[part] = nxt
            node = nxt
        node[path[-1]] = value
    return out


def bundled_scenario_path(name: str) -> Path:
    """Path of a scenario shipped with the package (e.g. ``default_table1``)."""
    res = resources.files("mmgsim.data") / f"{name}.toml"
    return Path(str(res))
