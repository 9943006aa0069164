"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, sections are dotted prefixes
(``trap.omega0_hz = 125000``). Every key except ``seed`` has a default;
frequency-like defaults marked ``auto`` are derived from the trap. Unknown or
repeated keys are errors. See ``KEYS`` for the full reference.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import dsp
from .dynamics import DEFAULT_DIAMETER, HBAR, KB, TrapConfig, default_mass_from_diameter
from .engine import EngineConfig
from .errors import ConfigError
from .oracle import RateParams

KINDS = ("run", "sweep", "transient", "oracle", "calibrate")
AUTO = "auto"
NONE = "none"
DEFAULT_OUTPUT = "phonolase_out"


@dataclass(frozen=True)
class Key:
    kind: str  # float | int | bool | str | grid | kind | optfloat
    default: object
    check: str = ""  # pos | nonneg | unit
    doc: str = ""


KEYS: dict[str, Key] = {
    "seed": Key("int", None, "nonneg", "RNG seed (required), 0 <= seed < 2**64"),
    "kind": Key("kind", "run", "", "experiment: run | sweep | transient | oracle | calibrate"),
    "output_dir": Key("str", AUTO, "", "output directory (auto: $PHONOLASE_OUTPUT or ./phonolase_out)"),
    "emit_plots": Key("bool", False, "", "write SVG plots"),
    "trap.mass_kg": Key("float", default_mass_from_diameter(DEFAULT_DIAMETER), "pos",
                        "sphere mass (default: 150 nm silica, 2200 kg/m^3)"),
    "trap.omega0_hz": Key("float", 125e3, "pos", "trap frequency omega0/2pi (the d.c. trap-power knob)"),
    "trap.gamma_hz": Key("float", 100.0, "nonneg", "momentum damping gamma/2pi"),
    "trap.temperature_k": Key("float", 300.0, "nonneg", "bath temperature"),
    "trap.hbar_eff": Key("float", HBAR, "pos", "effective quantum of action, J s"),
    "trap.thermal_phonons": Key("float", 0.0, "nonneg",
                                "if > 0, rescale hbar_eff so kB*T/(hbar_eff*omega0) equals this"),
    "trap.u_max": Key("float", 0.5, "unit", "EOM modulation limit"),
    "detector.sensitivity_m_rthz": Key("float", 1e-12, "nonneg", "displacement noise floor, m/sqrt(Hz)"),
    "detector.sample_rate_hz": Key("float", AUTO, "pos", "sample rate (auto: 128 x trap frequency)"),
    "nonlinear.bp_center_hz": Key("float", AUTO, "pos", "bandpass center (auto: trap frequency)"),
    "nonlinear.bp_q": Key("float", 10.0, "pos", "bandpass quality factor"),
    "nonlinear.phase_shift_rad": Key("float", 0.5 * math.pi, "", "phase advance at 2 x bp_center"),
    "nonlinear.gain": Key("float", 0.0, "nonneg", "depth per unit of (doubled signal / ref_amplitude^2)"),
    "nonlinear.ref_amplitude_m": Key("float", 0.0, "nonneg", "normalizing amplitude (0: thermal RMS)"),
    "linear.pll_center_hz": Key("float", AUTO, "pos", "PLL free-running frequency (auto: trap frequency)"),
    "linear.pll_bandwidth_hz": Key("float", 2e3, "pos", "PLL natural frequency, < pll_center/10"),
    "linear.pll_damping": Key("float", 1 / math.sqrt(2), "pos", "PLL damping factor"),
    "linear.phase_shift_rad": Key("float", 1.5 * math.pi, "", "offset added to twice the tracked phase"),
    "linear.depth": Key("float", 0.0, "nonneg", "fixed modulation depth (the pump)"),
    "engine.duration_s": Key("float", 0.5, "pos", "simulated time"),
    "engine.warmup_s": Key("float", AUTO, "nonneg", "discarded initial time (auto: 20/gamma)"),
    "engine.record_stride": Key("int", 16, "pos", "record every Nth sample"),
    "engine.gain_switch_time_s": Key("optfloat", None, "nonneg",
                                     "time the linear depth switches on (none: always on; transient: warmup)"),
    "engine.initial_phonons": Key("float", 0.0, "nonneg", "coherent excitation at t = 0"),
    "output.trajectory_stride": Key("int", 1, "pos", "write every Nth recorded sample to trajectory CSVs"),
    "sweep.grid": Key("grid", AUTO, "", "comma-separated depths (auto: 10 points over 0..3x threshold)"),
    "analysis.bins": Key("int", 50, "pos", "phonon histogram bins"),
    "analysis.lockin_tau_s": Key("float", AUTO, "pos", "lock-in time constant (auto: 20/trap frequency)"),
    "analysis.psd_segment": Key("int", 0, "nonneg", "Welch segment length in recorded samples (0: auto)"),
    "oracle.gain": Key("float", 0.0, "", "G, 1/s"),
    "oracle.loss": Key("float", 1.0, "nonneg", "Gamma, 1/s"),
    "oracle.sat": Key("float", 0.0, "nonneg", "eta, 1/(s phonon)"),
    "oracle.diffusion": Key("float", 1e4, "pos", "D, phonons/s"),
    "oracle.n0": Key("float", 1e4, "nonneg", "initial phonon number for SDE runs"),
    "oracle.dt": Key("float", 1e-3, "pos", "SDE time step"),
    "oracle.duration": Key("float", 0.0, "nonneg", "SDE trajectory duration (0: none)"),
    "oracle.paths": Key("int", 0, "nonneg", "SDE ensemble size (0: none)"),
}


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    engine: EngineConfig
    sweep_grid: tuple
    output_dir: Path
    emit_plots: bool
    oracle: RateParams
    values: dict = field(compare=True, repr=False)  # resolved flat values; dump_config writes these

    @property
    def seed(self) -> int:
        return self.engine.seed


def _parse_value(key: str, raw: str, lineno=None):
    spec = KEYS[key]
    where = f"line {lineno}: " if lineno else ""
    try:
        if raw == AUTO and spec.default == AUTO:
            return AUTO
        if spec.kind == "float":
            return float(raw)
        if spec.kind == "optfloat":
            return None if raw.lower() == NONE else float(raw)
        if spec.kind == "int":
            return int(raw, 0) if raw.lower().startswith("0x") else int(raw)
        if spec.kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if spec.kind == "grid":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if spec.kind == "kind":
            if raw not in KINDS:
                raise ValueError(raw)
            return raw
        return raw
    except ValueError:
        raise ConfigError(f"{where}{key}: cannot parse {raw!r} as {spec.kind}") from None


def parse_text(text: str) -> dict:
    """Parse config text into ``{key: typed value}`` (only keys present)."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(key, raw, lineno)
    return out


def _check(key, value):
    check = KEYS[key].check
    if value is None or value == AUTO or isinstance(value, (str, tuple, bool)):
        return
    if not math.isfinite(value):
        raise ConfigError(f"{key}: must be finite (got {value})")
    if check == "pos" and not value > 0:
        raise ConfigError(f"{key}: must be > 0 (got {value})")
    if check == "nonneg" and not value >= 0:
        raise ConfigError(f"{key}: must be >= 0 (got {value})")
    if check == "unit" and not 0 <= value <= 1:
        raise ConfigError(f"{key}: must lie in [0, 1] (got {value})")


def resolve(given: dict) -> dict:
    """Fill defaults and derive ``auto`` values; returns a complete flat mapping."""
    if given.get("seed") is None:
        raise ConfigError("seed: required key is missing")
    v = {k: given.get(k, spec.default) for k, spec in KEYS.items()}
    for k, val in v.items():
        _check(k, val)
    if v["seed"] >= 2**64:
        raise ConfigError("seed: must be < 2**64")
    f0 = v["trap.omega0_hz"]
    if v["trap.gamma_hz"] >= f0:
        raise ConfigError("trap.gamma_hz: must be < trap.omega0_hz (underdamped trap)")
    if v["trap.thermal_phonons"] > 0:
        if not v["trap.temperature_k"] > 0:
            raise ConfigError("trap.thermal_phonons: requires trap.temperature_k > 0")
        v["trap.hbar_eff"] = KB * v["trap.temperature_k"] / (2 * math.pi * f0 * v["trap.thermal_phonons"])
        v["trap.thermal_phonons"] = 0.0
    if v["output_dir"] == AUTO:
        v["output_dir"] = os.environ.get("PHONOLASE_OUTPUT", DEFAULT_OUTPUT)
    for key in ("detector.sample_rate_hz",):
        if v[key] == AUTO:
            v[key] = 128.0 * f0
    for key in ("nonlinear.bp_center_hz", "linear.pll_center_hz"):
        if v[key] == AUTO:
            v[key] = f0
    if v["engine.warmup_s"] == AUTO:
        g = 2 * math.pi * v["trap.gamma_hz"]
        v["engine.warmup_s"] = 20.0 / g if g > 0 else 0.0
    if v["analysis.lockin_tau_s"] == AUTO:
        v["analysis.lockin_tau_s"] = 20.0 / f0
    if v["sweep.grid"] == AUTO:
        th = 2 * v["trap.gamma_hz"] / f0  # depth where parametric gain omega0*depth/2 equals gamma
        v["sweep.grid"] = tuple(3 * th * i / 9 for i in range(10))
    if v["kind"] == "transient" and v["engine.gain_switch_time_s"] is None:
        v["engine.gain_switch_time_s"] = v["engine.warmup_s"]
    grid = v["sweep.grid"]
    if v["kind"] == "sweep":
        if not grid:
            raise ConfigError("sweep.grid: must be nonempty for kind=sweep")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("sweep.grid: must be strictly increasing")
        if any(d < 0 for d in grid):
            raise ConfigError("sweep.grid: depths must be >= 0")
    return v


def build(values: dict) -> ExperimentSpec:
    """Construct the typed spec from a complete flat mapping."""
    v = values
    try:
        trap = TrapConfig(
            mass=v["trap.mass_kg"],
            omega0=2 * math.pi * v["trap.omega0_hz"],
            gamma=2 * math.pi * v["trap.gamma_hz"],
            temperature=v["trap.temperature_k"],
            hbar_eff=v["trap.hbar_eff"],
            u_max=v["trap.u_max"],
        )
        detector = dsp.DetectorConfig(v["detector.sensitivity_m_rthz"], v["detector.sample_rate_hz"])
        nonlinear = dsp.NonlinearBranchConfig(
            bp_center=v["nonlinear.bp_center_hz"],
            bp_q=v["nonlinear.bp_q"],
            phase_shift=v["nonlinear.phase_shift_rad"],
            gain=v["nonlinear.gain"],
            ref_amplitude=v["nonlinear.ref_amplitude_m"],
        )
        linear = dsp.LinearBranchConfig(
            pll_center=v["linear.pll_center_hz"],
            pll_bandwidth=v["linear.pll_bandwidth_hz"],
            pll_damping=v["linear.pll_damping"],
            phase_shift=v["linear.phase_shift_rad"],
            depth=v["linear.depth"],
        )
        engine = EngineConfig(
            trap=trap,
            detector=detector,
            nonlinear=nonlinear,
            linear=linear,
            duration=v["engine.duration_s"],
            seed=v["seed"],
            record_stride=v["engine.record_stride"],
            warmup=v["engine.warmup_s"],
            gain_switch_time=v["engine.gain_switch_time_s"],
            initial_phonons=v["engine.initial_phonons"],
        )
        oracle = RateParams(v["oracle.gain"], v["oracle.loss"], v["oracle.sat"], v["oracle.diffusion"])
    except ConfigError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    return ExperimentSpec(
        kind=v["kind"],
        engine=engine,
        sweep_grid=tuple(v["sweep.grid"]),
        output_dir=Path(v["output_dir"]),
        emit_plots=bool(v["emit_plots"]),
        oracle=oracle,
        values=dict(v),
    )


def spec_from_mapping(given: dict) -> ExperimentSpec:
    return build(resolve(given))


def loads(text: str, **overrides) -> ExperimentSpec:
    given = parse_text(text)
    given.update({k: val for k, val in overrides.items() if val is not None})
    return spec_from_mapping(given)


def load_config(path, **overrides) -> ExperimentSpec:
    """Read a config file (or a run manifest.json) into an ExperimentSpec.

    ``overrides`` maps full key names to already-typed values.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        text = "\n".join(f"{k} = {val}" for k, val in json.loads(text)["config"].items())
    return loads(text, **overrides)


def format_value(value) -> str:
    if value is None:
        return NONE
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(x)) for x in value)
    return str(value)


def config_items(spec: ExperimentSpec) -> dict:
    return {k: format_value(spec.values[k]) for k in KEYS}


def dump_config(spec: ExperimentSpec) -> str:
    return "".join(f"{k} = {val}\n" for k, val in config_items(spec).items())


def reference_table() -> str:
    """Markdown table of every key, its default and meaning."""
    rows = ["| key | default | meaning |", "|---|---|---|"]
    for k, s in KEYS.items():
        default = "(required)" if s.default is None and k == "seed" else format_value(s.default)
        rows.append(f"| `{k}` | `{default}` | {s.doc} |")
    return "\n".join(rows)
