"""Shared laptop-scale operating point for the slow tests.

f0 = 125 kHz, gamma/2pi = 500 Hz (Q = 250), thermal occupation 1e4 via a
rescaled hbar_eff, 128 samples per trap period.
"""
import math
from dataclasses import replace

from phonolase import dsp
from phonolase.dynamics import TrapConfig
from phonolase.engine import EngineConfig

F0 = 125e3
GAMMA = 2 * math.pi * 500.0
N_TH = 1e4
THRESHOLD = 2 * GAMMA / (2 * math.pi * F0)  # depth where omega0*depth/2 = gamma
SWEEP_GAIN = 2e-5  # sqrt(D*eta)/gamma = 0.05
COOLING_GAIN = 0.04  # eta*n_th/gamma = 5
SWEEP_GRID = tuple(THRESHOLD * r for r in (0, 0.15, 0.3, 0.45, 0.6, 0.75, 1.3, 1.6, 2.0, 2.5))


def trap(**kw) -> TrapConfig:
    return TrapConfig.dimensionless(N_TH, omega0=2 * math.pi * F0, gamma=GAMMA, **kw)


def engine(duration=0.1, depth=0.0, gain=0.0, seed=0, stride=16, **kw) -> EngineConfig:
    return EngineConfig(
        trap=kw.pop("trap", trap()),
        detector=dsp.DetectorConfig(1e-12, 128 * F0),
        nonlinear=dsp.NonlinearBranchConfig(bp_center=F0, gain=gain),
        linear=dsp.LinearBranchConfig(pll_center=F0, pll_bandwidth=3e3, depth=depth),
        duration=duration,
        seed=seed,
        record_stride=stride,
        **kw,
    )


def with_phases(cfg: EngineConfig, cooling: float, amplifying: float) -> EngineConfig:
    return replace(cfg, nonlinear=replace(cfg.nonlinear, phase_shift=cooling),
                   linear=replace(cfg.linear, phase_shift=amplifying))


def mapping(kind, seed, output_dir, cooling=None, amplifying=None, **keys) -> dict:
    """Config-key form of the same operating point, for experiment-level runs."""
    v = {
        "kind": kind,
        "seed": seed,
        "output_dir": str(output_dir),
        "trap.omega0_hz": F0,
        "trap.gamma_hz": GAMMA / (2 * math.pi),
        "trap.thermal_phonons": N_TH,
        "linear.pll_bandwidth_hz": 3e3,
        "nonlinear.gain": SWEEP_GAIN,
    }
    if cooling is not None:
        v["nonlinear.phase_shift_rad"] = cooling
    if amplifying is not None:
        v["linear.phase_shift_rad"] = amplifying
    v.update(keys)
    return v
