"""Static SVG figures. Derived artifacts only; nothing reads them back."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import analysis  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def sweep_plots(out: Path, rows) -> list[Path]:
    pts = [r for r in rows if not r[6]]
    d = np.array([r[0] for r in pts])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(d, [r[1] for r in pts], "o-")
    for r in rows:
        if r[6]:
            ax.axvline(r[0], ls="--", c="k", lw=0.8)
    ax.set_xlabel("linear depth")
    ax.set_ylabel("mean phonon number")
    files = [_save(fig, out / "mean_n_vs_depth.svg")]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(d, [r[3] for r in pts], "o-")
    ax.axhline(2, c="gray", lw=0.5)
    ax.axhline(1, c="gray", lw=0.5)
    ax.set_xlabel("linear depth")
    ax.set_ylabel("g2(0)")
    files.append(_save(fig, out / "g2_vs_depth.svg"))
    return files


def transient_plots(out: Path, rec) -> list[Path]:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(rec.times * 1e3, np.maximum(rec.n, 1e-300))
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("phonon number")
    return [_save(fig, out / "transient_n.svg")]


def run_plots(out: Path, rec, spec) -> list[Path]:
    fs_rec = 1.0 / rec.sample_interval
    f0 = spec.engine.trap.f0
    tau = spec.values["analysis.lockin_tau_s"]
    if not fs_rec > 2.2 * f0:
        return []
    iq = analysis.lock_in(rec.x, f0, tau, fs_rec, t0=rec.times[0]).after(rec.times[0] + 10 * tau)
    r = np.hypot(iq.i, iq.q)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(r, bins=60, density=True)
    ax.set_xlabel("lock-in radius (m)")
    ax.set_ylabel("density")
    return [_save(fig, out / "radial_histogram.svg")]
