"""Canonical experiments and their CSV / manifest outputs.

Every experiment writes into a staging directory under ``output_dir`` and
promotes its files only on success, so a failed run leaves no partial output.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, analysis, oracle
from .config import ExperimentSpec, build, config_items
from .engine import (EngineConfig, TrajectoryRecord, derive_seed, measure_net_rate, phase_scans,
                     run_closed_loop)
from .errors import CalibrationError, ConfigError, NumericalAbort

log = logging.getLogger(__name__)

CSV_SCHEMA_VERSION = 1
TRAJECTORY_COLUMNS = ("t_s", "x_m", "n", "u_nl", "u_lin", "pll_freq_hz", "pll_locked")
SUMMARY_COLUMNS = ("depth", "mean_n", "var_n", "g2_zero", "annulus_score", "linewidth_hz", "is_threshold")
TRANSIENT_COLUMNS = ("depth", "switch_time_s", "growth_rate_per_s", "calibrated_net_rate_per_s",
                     "plateau_mean_n", "fit_r2")
DISTRIBUTION_COLUMNS = ("n", "density")
ORACLE_SUMMARY_COLUMNS = ("gain", "loss", "sat", "diffusion", "mean_n", "var_n", "g2_zero", "ensemble_ks")
SDE_COLUMNS = ("t_s", "n")
PHASE_SCAN_COLUMNS = ("branch", "phase_rad", "mean_n")
CALIBRATION_COLUMNS = ("cooling_phase_rad", "amplifying_phase_rad")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, columns, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_trajectory(path: Path, rec: TrajectoryRecord) -> Path:
    cols = [rec.times.tolist(), rec.x.tolist(), rec.n.tolist(), rec.u_nl.tolist(), rec.u_lin.tolist(),
            rec.pll_freq.tolist(), rec.pll_locked.tolist()]
    return write_csv(path, TRAJECTORY_COLUMNS, zip(*cols))


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# ---------------------------------------------------------------- record summaries


def summarize_record(rec: TrajectoryRecord, cfg: EngineConfig, tau: float, psd_segment: int = 0) -> dict:
    """mean/var/g2 of n over all recorded samples, plus annulus score and linewidth when computable."""
    out = {"mean_n": float(rec.n.mean()), "var_n": float(rec.n.var()),
           "g2_zero": analysis.g2_zero(rec.n) if rec.n.mean() > 0 else None,
           "annulus_score": None, "peak_radius": None, "linewidth_hz": None}
    fs_rec = 1.0 / rec.sample_interval
    f0 = cfg.trap.f0
    gamma = cfg.trap.gamma
    if fs_rec > 2.2 * f0 and tau >= 10.0 / f0:
        iq = analysis.lock_in(rec.x, f0, tau, fs_rec, t0=rec.times[0]).after(rec.times[0] + 10 * tau)
        if gamma > 0 and len(iq.i):
            iq = iq.decimate(analysis.decorrelation_stride(1.0 / fs_rec, gamma))
        if len(iq.i) >= analysis.MIN_RADIAL_SAMPLES:
            out["peak_radius"], out["annulus_score"] = analysis.radial_statistics(iq)
        seg = psd_segment or auto_segment(fs_rec, gamma, len(rec.x))
        if seg and len(rec.x) >= 2.5 * seg:
            out["linewidth_hz"] = analysis.welch_psd(rec.x, fs_rec, seg).linewidth
    return out


def auto_segment(sample_rate: float, gamma: float, n: int) -> int:
    """Segment giving ~8 bins per damping linewidth, capped so at least 4 segments fit."""
    want = int(8 * sample_rate / (gamma / (2 * math.pi))) if gamma > 0 else n
    seg = min(want, int(n / 2.5))
    return seg if seg >= 64 else 0


# ---------------------------------------------------------------- experiments


def _run(spec: ExperimentSpec, out: Path) -> list[Path]:
    cfg = spec.engine
    rec = run_closed_loop(cfg)
    files = [write_trajectory(out / "trajectory.csv", rec.decimate(spec.values["output.trajectory_stride"]))]
    s = summarize_record(rec, cfg, spec.values["analysis.lockin_tau_s"], spec.values["analysis.psd_segment"])
    files.append(write_csv(out / "summary.csv", SUMMARY_COLUMNS,
                           [(cfg.linear.depth, s["mean_n"], s["var_n"], s["g2_zero"], s["annulus_score"],
                             s["linewidth_hz"], 0)]))
    if spec.emit_plots:
        from . import plots

        files += plots.run_plots(out, rec, spec)
    return files


def _sweep_point(values: dict, index: int, depth: float, out: str):
    spec = build(values)
    cfg = replace(spec.engine.with_depth(depth), seed=derive_seed(spec.seed, index))
    rec = run_closed_loop(cfg)
    thin = rec.decimate(values["output.trajectory_stride"])
    path = write_trajectory(Path(out) / f"trajectory_{index:03d}.csv", thin)
    s = summarize_record(rec, cfg, values["analysis.lockin_tau_s"], values["analysis.psd_segment"])
    return index, depth, s, str(path)


def default_jobs() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _sweep(spec: ExperimentSpec, out: Path, jobs: int) -> list[Path]:
    grid = spec.sweep_grid
    args = [(spec.values, i, d, str(out)) for i, d in enumerate(grid)]
    if jobs > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(grid))) as pool:
            results = list(pool.map(_sweep_point, *zip(*args)))
    else:
        results = [_sweep_point(*a) for a in args]
    results.sort(key=lambda r: r[1])  # rows keyed by depth
    files = [Path(r[3]) for r in results]
    rows = [(d, s["mean_n"], s["var_n"], s["g2_zero"], s["annulus_score"], s["linewidth_hz"], 0)
            for _, d, s, _ in results]
    threshold = None
    if len(rows) >= 8 and all(r[3] is not None for r in rows):
        try:
            threshold = analysis.detect_threshold([(r[0], r[1], r[3]) for r in rows])
        except CalibrationError as exc:
            log.warning("threshold detection failed: %s", exc)
    if threshold is not None:
        rows.append((threshold.depth, None, None, None, None, None, 1))
    files.append(write_csv(out / "summary.csv", SUMMARY_COLUMNS, rows))
    if spec.emit_plots:
        from . import plots

        files += plots.sweep_plots(out, rows)
    return files


def transient_fit(rec: TrajectoryRecord, plateau_fraction: float = 0.25):
    """(growth fit on the rise through plateau*[1e-2, 1e-1], plateau mean over the final quarter)."""
    k = int(len(rec.n) * (1 - plateau_fraction))
    plateau = float(rec.n[k:].mean())
    fit = analysis.rising_edge_fit(rec.times, rec.n, 1e-2 * plateau, 1e-1 * plateau)
    return fit, plateau


def _transient(spec: ExperimentSpec, out: Path) -> list[Path]:
    cfg = spec.engine
    rec = run_closed_loop(cfg)
    fit, plateau = transient_fit(rec)
    net = measure_net_rate(cfg, cfg.linear.depth).slope
    files = [write_trajectory(out / "trajectory.csv", rec.decimate(spec.values["output.trajectory_stride"]))]
    files.append(write_csv(out / "transient.csv", TRANSIENT_COLUMNS,
                           [(cfg.linear.depth, cfg.gain_switch_time, fit.slope, net, plateau, fit.r2)]))
    if spec.emit_plots:
        from . import plots

        files += plots.transient_plots(out, rec)
    return files


def _oracle(spec: ExperimentSpec, out: Path) -> list[Path]:
    p = spec.oracle
    v = spec.values
    dist = oracle.steady_state_distribution(p)
    step = max(1, (len(dist.bin_edges) - 1) // 2000)
    files = [write_csv(out / "distribution.csv", DISTRIBUTION_COLUMNS,
                       zip(dist.bin_edges[::step].tolist(), dist.density[::step].tolist()))]
    ks = None
    if v["oracle.paths"] > 0:
        dur = v["oracle.duration"] or 20.0 / max(abs(p.net), p.loss, 1e-12)
        final = oracle.sde_ensemble(p, v["oracle.n0"], v["oracle.dt"], dur, v["oracle.paths"], spec.seed)
        ks = analysis.ks_distance(final, dist)
    if v["oracle.duration"] > 0:
        n_steps = int(round(v["oracle.duration"] / v["oracle.dt"]))
        t, n = oracle.sde_trajectory(p, v["oracle.n0"], v["oracle.dt"], v["oracle.duration"], spec.seed,
                                     stride=max(1, n_steps // 10000))
        files.append(write_csv(out / "sde_trajectory.csv", SDE_COLUMNS, zip(t.tolist(), n.tolist())))
    files.append(write_csv(out / "oracle_summary.csv", ORACLE_SUMMARY_COLUMNS,
                           [(p.gain, p.loss, p.sat, p.diffusion, dist.mean, dist.variance, dist.g2_zero, ks)]))
    return files


def _calibrate(spec: ExperimentSpec, out: Path) -> list[Path]:
    cfg = spec.engine
    cooling, amplifying, ph, m_nl, m_lin = phase_scans(cfg)
    rows = [("nonlinear", a, b) for a, b in zip(ph, m_nl)] + [("linear", a, b) for a, b in zip(ph, m_lin)]
    return [
        write_csv(out / "phase_scan.csv", PHASE_SCAN_COLUMNS, rows),
        write_csv(out / "calibration.csv", CALIBRATION_COLUMNS, [(cooling, amplifying)]),
    ]


def write_manifest(path: Path, spec: ExperimentSpec, files) -> Path:
    doc = {
        "artifact": "phonolase",
        "version": __version__,
        "csv_schema": CSV_SCHEMA_VERSION,
        "kind": spec.kind,
        "seed": spec.seed,
        "config": config_items(spec),
        "files": sorted(Path(f).name for f in files),
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def run_experiment(spec: ExperimentSpec, jobs: int | None = None) -> int:
    """Execute ``spec``; returns 0 on success, 1 on config error, 2 on numerical abort."""
    out = Path(spec.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        log.error("cannot create output directory %s: %s", out, exc)
        return EXIT_CONFIG
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
    jobs = jobs or default_jobs()
    try:
        if spec.kind == "run":
            files = _run(spec, staging)
        elif spec.kind == "sweep":
            files = _sweep(spec, staging, jobs)
        elif spec.kind == "transient":
            files = _transient(spec, staging)
        elif spec.kind == "oracle":
            files = _oracle(spec, staging)
        elif spec.kind == "calibrate":
            files = _calibrate(spec, staging)
        else:
            raise ConfigError(f"kind: unknown experiment {spec.kind!r}")
        files.append(write_manifest(staging / "manifest.json", spec, files))
        for f in files:
            os.replace(f, out / Path(f).name)
        return EXIT_OK
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (NumericalAbort, CalibrationError) as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    finally:
        shutil.rmtree(staging, ignore_errors=True)
