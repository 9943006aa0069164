import json
import math
import os
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from phonolase import config, dsp
from phonolase.cli import main
from phonolase.dynamics import TrapConfig
from phonolase.engine import EngineConfig
from phonolase.errors import ConfigError
from phonolase.experiments import (
    CALIBRATION_COLUMNS,
    DISTRIBUTION_COLUMNS,
    ORACLE_SUMMARY_COLUMNS,
    PHASE_SCAN_COLUMNS,
    SDE_COLUMNS,
    SUMMARY_COLUMNS,
    TRAJECTORY_COLUMNS,
    TRANSIENT_COLUMNS,
    read_csv,
)

DESK = """\
trap.gamma_hz = 500
trap.thermal_phonons = 1e4
linear.pll_bandwidth_hz = 3000
nonlinear.gain = 2e-5
engine.duration_s = 0.012
"""


def write(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------- config


def test_minimal_file_gives_defaults(tmp_path):
    spec = config.load_config(write(tmp_path, "seed = 42\n"))
    trap = TrapConfig()
    assert spec.kind == "run"
    assert spec.seed == 42
    assert spec.engine == EngineConfig(trap=trap, seed=42, record_stride=16)
    assert spec.engine.detector == dsp.DetectorConfig(1e-12, 128 * 125e3)
    assert spec.engine.warmup == pytest.approx(20 / trap.gamma)
    assert len(spec.sweep_grid) == 10
    assert spec.emit_plots is False


def test_every_key_documented():
    table = config.reference_table()
    for key, k in config.KEYS.items():
        assert f"`{key}`" in table
        assert k.doc


@pytest.mark.parametrize("text,match", [
    ("seed = 1\ntrap.omega0_hz = -1\n", "trap.omega0_hz: must be > 0"),
    ("seed = 1\ntrap.u_max = 2\n", "trap.u_max"),
    ("seed = 1\ntrap.gamma_hz = 2e5\n", "trap.gamma_hz"),
    ("seed = 1\ntrap.omgea0_hz = 1\n", "line 2: unknown key 'trap.omgea0_hz'"),
    ("seed = 1\nseed = 2\n", "line 2: duplicate key"),
    ("seed = 1\nnonsense\n", "line 2: expected 'key = value'"),
    ("seed = 1\ntrap.mass_kg = heavy\n", "line 2: trap.mass_kg: cannot parse"),
    ("trap.mass_kg = 1e-18\n", "seed: required"),
    ("seed = 1\nkind = sweep\nsweep.grid = 0.1, 0.05\n", "sweep.grid: must be strictly increasing"),
    ("seed = 1\nlinear.pll_bandwidth_hz = 20000\n", "pll_bandwidth"),
    ("seed = 1\ndetector.sample_rate_hz = 1e6\n", "sample_rate"),
])
def test_validation_names_key(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        config.load_config(write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        config.load_config(tmp_path / "absent.cfg")


def test_comments_and_overrides(tmp_path):
    spec = config.load_config(write(tmp_path, "# header\nseed = 1  # trailing\n\n"), seed=9, kind="oracle")
    assert spec.seed == 9 and spec.kind == "oracle"


settable = st.fixed_dictionaries({}, optional={
    "trap.omega0_hz": st.floats(5e4, 3e5),
    "trap.gamma_hz": st.floats(1.0, 1e3),
    "trap.temperature_k": st.floats(0.0, 500.0),
    "trap.thermal_phonons": st.floats(1.0, 1e6),
    "trap.u_max": st.floats(0.0, 1.0),
    "nonlinear.bp_q": st.floats(0.5, 100.0),
    "nonlinear.phase_shift_rad": st.floats(-10.0, 10.0),
    "nonlinear.gain": st.floats(0.0, 1.0),
    "linear.depth": st.floats(0.0, 0.5),
    "linear.pll_damping": st.floats(0.1, 3.0),
    "engine.duration_s": st.floats(1.0, 10.0),
    "engine.record_stride": st.integers(1, 64),
    "engine.gain_switch_time_s": st.one_of(st.none(), st.floats(0.0, 0.5)),
    "emit_plots": st.booleans(),
    "kind": st.sampled_from(config.KINDS),
    "sweep.grid": st.lists(st.floats(0.0, 0.1), min_size=1, max_size=6, unique=True).map(lambda v: tuple(sorted(v))),
    "oracle.gain": st.floats(-10, 10),
})


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(settable, st.integers(0, 2**64 - 1))
def test_dump_round_trip(tmp_path, values, seed):
    values = dict(values, seed=seed)
    try:
        spec = config.spec_from_mapping(values)
    except ConfigError:
        return  # generated an invalid combination; validation covered elsewhere
    text = config.dump_config(spec)
    again = config.loads(text)
    assert again == spec
    assert config.dump_config(again) == text


# ---------------------------------------------------------------- CSV schema


def test_golden_columns():
    assert TRAJECTORY_COLUMNS == ("t_s", "x_m", "n", "u_nl", "u_lin", "pll_freq_hz", "pll_locked")
    assert SUMMARY_COLUMNS == ("depth", "mean_n", "var_n", "g2_zero", "annulus_score", "linewidth_hz",
                               "is_threshold")
    assert TRANSIENT_COLUMNS == ("depth", "switch_time_s", "growth_rate_per_s", "calibrated_net_rate_per_s",
                                 "plateau_mean_n", "fit_r2")
    assert DISTRIBUTION_COLUMNS == ("n", "density")
    assert ORACLE_SUMMARY_COLUMNS == ("gain", "loss", "sat", "diffusion", "mean_n", "var_n", "g2_zero",
                                      "ensemble_ks")
    assert SDE_COLUMNS == ("t_s", "n")
    assert PHASE_SCAN_COLUMNS == ("branch", "phase_rad", "mean_n")
    assert CALIBRATION_COLUMNS == ("cooling_phase_rad", "amplifying_phase_rad")


# ---------------------------------------------------------------- CLI


def test_run_writes_outputs(tmp_path):
    cfg = write(tmp_path, "seed = 3\nlinear.depth = 0.012\n" + DESK)
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--output", str(out), "--plots"]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["manifest.json", "radial_histogram.svg", "summary.csv", "trajectory.csv"]
    head, rows = read_csv(out / "trajectory.csv")
    assert tuple(head) == TRAJECTORY_COLUMNS and rows
    head, rows = read_csv(out / "summary.csv")
    assert tuple(head) == SUMMARY_COLUMNS and len(rows) == 1
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 3 and man["kind"] == "run" and man["csv_schema"] == 1
    assert set(man["config"]) == set(config.KEYS)
    assert set(man["files"]) == set(names) - {"manifest.json"}


def test_manifest_rerun_is_bit_identical(tmp_path):
    cfg = write(tmp_path, "seed = 11\nlinear.depth = 0.016\n" + DESK)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg), "--output", str(a)]) == 0
    assert main(["run", "--config", str(a / "manifest.json"), "--output", str(b)]) == 0
    for name in ("trajectory.csv", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    ma["config"].pop("output_dir"), mb["config"].pop("output_dir")
    assert ma == mb


def test_seed_override_changes_output(tmp_path):
    cfg = write(tmp_path, "seed = 1\n" + DESK)
    assert main(["run", "--config", str(cfg), "--output", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(cfg), "--output", str(tmp_path / "b"), "--seed", "2"]) == 0
    assert (tmp_path / "a/trajectory.csv").read_bytes() != (tmp_path / "b/trajectory.csv").read_bytes()
    assert json.loads((tmp_path / "b/manifest.json").read_text())["seed"] == 2


def test_config_error_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, "seed = 1\ntrap.omega0_hz = -1\n")
    assert main(["run", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 1
    assert "trap.omega0_hz" in capsys.readouterr().err
    assert main(["run", "--config", str(cfg), "--jobs", "0"]) == 1


def test_numerical_abort_removes_partial_output(tmp_path):
    cfg = write(tmp_path, "seed = 1\nlinear.depth = 0.032\nnonlinear.gain = 0\n" + DESK.replace(
        "nonlinear.gain = 2e-5\n", "").replace("0.012", "0.05"))
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg), "--output", str(out)]) == 2
    assert list(out.iterdir()) == []


def test_no_writes_outside_output_dir(tmp_path, monkeypatch):
    cfg = write(tmp_path, "seed = 1\n" + DESK)
    work = tmp_path / "work"
    work.mkdir()
    monkeypatch.chdir(work)
    monkeypatch.setenv("PHONOLASE_OUTPUT", str(tmp_path / "env_out"))
    before = set(tmp_path.rglob("*"))
    assert main(["run", "--config", str(cfg)]) == 0
    created = set(tmp_path.rglob("*")) - before
    assert created and all(p.is_relative_to(tmp_path / "env_out") for p in created)
    assert not any(p.name.startswith(".staging") for p in created)


def test_oracle_kind_thermal(tmp_path):
    cfg = write(tmp_path, "seed = 5\noracle.gain = 0\noracle.loss = 1\noracle.diffusion = 100\n"
                          "oracle.paths = 2000\noracle.dt = 0.001\noracle.duration = 5\noracle.n0 = 100\n")
    out = tmp_path / "o"
    assert main(["oracle", "--config", str(cfg), "--output", str(out)]) == 0
    head, rows = read_csv(out / "oracle_summary.csv")
    row = dict(zip(head, rows[0]))
    assert float(row["g2_zero"]) == pytest.approx(2.0, abs=0.01)
    assert float(row["ensemble_ks"]) < 0.05
    head, rows = read_csv(out / "distribution.csv")
    assert tuple(head) == DISTRIBUTION_COLUMNS
    assert (out / "sde_trajectory.csv").exists()


def test_sweep_rows_keyed_by_depth(tmp_path):
    th = 2 * 500 / 125e3
    grid = ", ".join(repr(th * r) for r in (0, 0.3, 0.6, 0.75, 1.3, 1.6, 2.0, 2.5))
    cfg = write(tmp_path, f"seed = 2\nsweep.grid = {grid}\noutput.trajectory_stride = 50\n" + DESK)
    out1, out2 = tmp_path / "s1", tmp_path / "s2"
    assert main(["sweep", "--config", str(cfg), "--output", str(out1), "--jobs", "1", "--plots"]) == 0
    assert main(["sweep", "--config", str(cfg), "--output", str(out2), "--jobs", "2"]) == 0
    assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()
    head, rows = read_csv(out1 / "summary.csv")
    depths = [float(r[0]) for r in rows if r[-1] == "0"]
    assert depths == sorted(depths) and len(depths) == 8
    assert sum(r[-1] == "1" for r in rows) == 1
    assert (out1 / "trajectory_007.csv").exists()
    assert (out1 / "mean_n_vs_depth.svg").exists() and (out1 / "g2_vs_depth.svg").exists()


def test_default_output_dir(tmp_path, monkeypatch):
    monkeypatch.delenv("PHONOLASE_OUTPUT", raising=False)
    spec = config.load_config(write(tmp_path, "seed = 1\n"))
    assert spec.output_dir == Path(config.DEFAULT_OUTPUT)
    monkeypatch.setenv("PHONOLASE_OUTPUT", str(tmp_path))
    assert config.load_config(write(tmp_path, "seed = 1\n")).output_dir == tmp_path
    assert math.isfinite(spec.engine.dt)
    assert os.fspath(spec.output_dir)
