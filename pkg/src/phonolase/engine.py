"""Closed feedback loop: oscillator -> detector -> two branches -> EOM -> stiffness.

Per sample k:
    1. step the oscillator with the modulation u_k computed at sample k-1
    2. read the detector
    3. nonlinear branch: bandpass -> doubler -> phase shift (at 2*bp_center) -> gain
    4. linear branch: PLL, then depth * cos(2*phase + phase_shift)
    5. u_{k+1} = clamp(u_nl + u_lin, +-u_max)

The actuator therefore lags the measurement by exactly one sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from . import dsp
from .dynamics import TrapConfig, _advance, _phonons, check_time_step
from .analysis import RateFit, fit_log_rate
from .errors import CalibrationError, ConfigError, NumericalAbort
from .oracle import RateParams, fit_saturation, steady_state_mean

CHUNK = 1 << 16
BLOWUP_FACTOR = 1e6
WARMUP_DAMPING_TIMES = 20.0


def derive_seed(seed: int, index: int) -> int:
    """Seed for run ``index`` of a sweep: word 0 of SeedSequence(seed, spawn_key=(index,))."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class EngineConfig:
    trap: TrapConfig = TrapConfig()
    detector: dsp.DetectorConfig = dsp.DetectorConfig()
    nonlinear: dsp.NonlinearBranchConfig = dsp.NonlinearBranchConfig()
    linear: dsp.LinearBranchConfig = dsp.LinearBranchConfig()
    duration: float = 0.5
    seed: int = 0
    record_stride: int = 1
    warmup: float | None = None  # None: 20/gamma
    gain_switch_time: float | None = None
    initial_phonons: float = 0.0

    def __post_init__(self):
        if self.warmup is None:
            w = WARMUP_DAMPING_TIMES / self.trap.gamma if self.trap.gamma > 0 else 0.0
            object.__setattr__(self, "warmup", w)
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if not (self.duration > self.warmup >= 0):
            raise ConfigError(f"need duration > warmup >= 0 (duration={self.duration}, warmup={self.warmup})")
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise ConfigError("record_stride must be a positive integer")
        if self.gain_switch_time is not None and self.gain_switch_time < 0:
            raise ConfigError("gain_switch_time must be >= 0")
        if self.initial_phonons < 0:
            raise ConfigError("initial_phonons must be >= 0")
        f0 = self.trap.f0
        if not self.detector.sample_rate > 20 * f0:
            raise ConfigError("detector.sample_rate must exceed 20x the trap frequency")
        check_time_step(self.trap.omega0, self.dt)

    @property
    def dt(self) -> float:
        return 1.0 / self.detector.sample_rate

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def with_depth(self, depth: float) -> "EngineConfig":
        return replace(self, linear=replace(self.linear, depth=depth))

    def with_nonlinear_gain(self, gain: float) -> "EngineConfig":
        return replace(self, nonlinear=replace(self.nonlinear, gain=gain))


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    x: np.ndarray
    n: np.ndarray
    u_nl: np.ndarray
    u_lin: np.ndarray
    pll_freq: np.ndarray
    pll_locked: np.ndarray

    def __len__(self):
        return len(self.times)

    @property
    def sample_interval(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else float("nan")

    def decimate(self, every: int) -> "TrajectoryRecord":
        return TrajectoryRecord(*(getattr(self, f)[::every] for f in TRAJECTORY_FIELDS))


TRAJECTORY_FIELDS = ("times", "x", "n", "u_nl", "u_lin", "pll_freq", "pll_locked")

# consts layout for the kernel
(_W0SQ, _GAM, _DT, _KICK, _DET, _MASS, _W0, _HBAR, _NLK, _LSHIFT, _UMAX, _GUARD,
 _DEPTH, _PLLC) = range(14)


@njit(cache=True)
def _loop(k0, n_run, st, cst, bp_c, bp_s, fd_a, fd_s, ps_d, ps_s, pll_p, pll_s,
          noise, switch_step, rec_start, stride,
          r_t, r_x, r_n, r_unl, r_ulin, r_f, r_l, ridx):
    """Advance ``n_run`` samples starting at global step ``k0``. Returns (ridx, status)."""
    x = st[0]
    v = st[1]
    u = st[2]
    unl = st[3]
    ulin = st[4]
    for j in range(n_run):
        k = k0 + j + 1
        x, v = _advance(x, v, cst[_W0SQ], u, cst[_GAM], cst[_DT], cst[_KICK] * noise[0, j])
        if not (abs(x) <= cst[_GUARD]) or not math.isfinite(v):
            st[0] = x
            st[1] = v
            return ridx, k
        y = x + cst[_DET] * noise[1, j]
        # nonlinear branch
        b = dsp.bandpass_kernel(bp_c, bp_s, y)
        d = dsp.doubler_kernel(fd_a, fd_s, b)
        unl = cst[_NLK] * dsp.delay_kernel(ps_d, ps_s, d)
        # linear branch
        ph = pll_s[0]
        dsp.pll_kernel(pll_p, pll_s, y)
        depth = cst[_DEPTH] if k >= switch_step else 0.0
        ulin = depth * math.cos(2.0 * ph + cst[_LSHIFT])
        u = dsp.combine_and_limit(unl, ulin, cst[_UMAX])
        if k >= rec_start and (k - rec_start) % stride == 0:
            r_t[ridx] = k * cst[_DT]
            r_x[ridx] = x
            r_n[ridx] = _phonons(x, v, cst[_MASS], cst[_W0], cst[_HBAR])
            r_unl[ridx] = unl
            r_ulin[ridx] = ulin
            r_f[ridx] = cst[_PLLC] + pll_s[1]
            r_l[ridx] = pll_s[8] > 0.5
            ridx += 1
    st[0] = x
    st[1] = v
    st[2] = u
    st[3] = unl
    st[4] = ulin
    return ridx, 0


def _reference_amplitude(cfg: EngineConfig) -> float:
    ref = cfg.nonlinear.ref_amplitude or cfg.trap.thermal_amplitude
    if cfg.nonlinear.gain > 0 and not ref > 0:
        raise ConfigError("nonlinear.ref_amplitude must be set when temperature is 0 and gain > 0")
    return ref


def run_closed_loop(cfg: EngineConfig) -> TrajectoryRecord:
    """Run one closed-loop experiment; deterministic in ``cfg`` (including seed)."""
    trap, det, nl, lin = cfg.trap, cfg.detector, cfg.nonlinear, cfg.linear
    fs = det.sample_rate
    if abs(lin.pll_center - trap.f0) > 0.2 * trap.f0:
        raise ConfigError("linear.pll_center must be within 20% of the trap frequency")
    dt = cfg.dt
    n_steps = cfg.n_steps

    bp_c = dsp.bandpass_coefficients(nl.bp_center, nl.bp_q, fs)
    bp_s = np.zeros(2)
    fd_a = 1.0 - math.exp(-dsp.TWO_PI * dsp.DOUBLER_HP_RATIO * nl.bp_center / fs)
    fd_s = np.zeros(1)
    ps_d = dsp.phase_delay_samples(nl.phase_shift, 2 * nl.bp_center, fs)
    ps_s = dsp.delay_line_state(fs / (2 * nl.bp_center))
    pll_p = dsp.pll_parameters(lin, fs)
    pll_s = dsp.pll_initial_state(0.0)

    ref = _reference_amplitude(cfg)
    x0 = trap.amplitude_for_phonons(cfg.initial_phonons)
    scale = max(trap.thermal_amplitude, x0, cfg.nonlinear.ref_amplitude, det.noise_rms)
    cst = np.zeros(14)
    cst[_W0SQ] = trap.omega0**2
    cst[_GAM] = trap.gamma
    cst[_DT] = dt
    cst[_KICK] = trap.force_noise * math.sqrt(dt)
    cst[_DET] = det.noise_rms
    cst[_MASS] = trap.mass
    cst[_W0] = trap.omega0
    cst[_HBAR] = trap.hbar_eff
    cst[_NLK] = nl.gain / ref**2 if nl.gain > 0 else 0.0
    cst[_LSHIFT] = lin.phase_shift
    cst[_UMAX] = trap.u_max
    cst[_GUARD] = BLOWUP_FACTOR * scale
    cst[_DEPTH] = lin.depth
    cst[_PLLC] = lin.pll_center

    switch_step = 0 if cfg.gain_switch_time is None else int(math.ceil(cfg.gain_switch_time / dt - 1e-9))
    rec_start = max(1, int(math.ceil(cfg.warmup / dt - 1e-9)))
    stride = int(cfg.record_stride)
    n_rec = (n_steps - rec_start) // stride + 1 if n_steps >= rec_start else 0
    r_t = np.empty(n_rec)
    r_x = np.empty(n_rec)
    r_n = np.empty(n_rec)
    r_unl = np.empty(n_rec)
    r_ulin = np.empty(n_rec)
    r_f = np.empty(n_rec)
    r_l = np.empty(n_rec, dtype=bool)

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    st = np.array([x0, 0.0, 0.0, 0.0, 0.0])
    ridx = 0
    k0 = 0
    while k0 < n_steps:
        n_run = min(CHUNK, n_steps - k0)
        noise = rng.standard_normal((2, CHUNK))
        ridx, status = _loop(k0, n_run, st, cst, bp_c, bp_s, fd_a, fd_s, ps_d, ps_s, pll_p, pll_s,
                             noise, switch_step, rec_start, stride,
                             r_t, r_x, r_n, r_unl, r_ulin, r_f, r_l, ridx)
        if status:
            t_fail = status * dt
            raise NumericalAbort(
                f"displacement exceeded {BLOWUP_FACTOR:g}x the amplitude scale at t={t_fail:.6g} s "
                f"(last stable time {t_fail - dt:.6g} s); runaway gain without saturation headroom",
                last_stable_time=t_fail - dt,
            )
        k0 += n_run
    return TrajectoryRecord(r_t[:ridx], r_x[:ridx], r_n[:ridx], r_unl[:ridx], r_ulin[:ridx],
                            r_f[:ridx], r_l[:ridx])


# ---------------------------------------------------------------- calibration


def measure_net_rate(cfg: EngineConfig, depth: float, duration: float | None = None) -> RateFit:
    """Net energy growth rate d ln n/dt with the linear branch at ``depth``.

    The loop is started from a coherent excitation at the thermal amplitude with the
    bath nearly frozen (T scaled by 1e-6) and the nonlinear branch off.
    """
    trap = cfg.trap
    n0 = trap.thermal_phonons
    if not n0 > 0:
        raise ConfigError("rate calibration needs temperature > 0 to set the excitation scale")
    cold = replace(trap, temperature=trap.temperature * 1e-6)
    if duration is None:
        duration = 4.0 / trap.gamma
    settle = 5.0 / (dsp.TWO_PI * cfg.linear.pll_damping * cfg.linear.pll_bandwidth)
    stride = max(1, int(duration / cfg.dt / 2000))
    run_cfg = replace(
        cfg,
        trap=cold,
        nonlinear=replace(cfg.nonlinear, gain=0.0),
        linear=replace(cfg.linear, depth=depth),
        duration=duration,
        warmup=settle,
        gain_switch_time=None,
        initial_phonons=n0,
        record_stride=stride,
    )
    rec = run_closed_loop(run_cfg)
    fit = fit_log_rate(rec.times, rec.n, n0 / 20.0, n0 * 1e4)
    if fit.r2 < 0.95:
        raise CalibrationError(f"no exponential window found (r^2 = {fit.r2:.3f} < 0.95); use a longer run")
    return fit


def calibrate_linear_rate(cfg: EngineConfig, depth: float, duration: float | None = None) -> float:
    """Gain rate G (1/s) added by the linear branch at ``depth``: fitted slope + gamma."""
    return measure_net_rate(cfg, depth, duration).slope + cfg.trap.gamma


def steady_mean(cfg: EngineConfig) -> float:
    return float(run_closed_loop(cfg).n.mean())


def scan_phase(cfg: EngineConfig, branch: str, n_points: int = 16):
    """Steady-state mean n versus the ``branch`` phase shift over [0, 2pi).

    Diverging runs score +inf. Returns ``(phases, means)``.
    """
    phases = dsp.TWO_PI * np.arange(n_points) / n_points
    means = np.empty(n_points)
    for i, ph in enumerate(phases):
        if branch == "nonlinear":
            c = replace(cfg, nonlinear=replace(cfg.nonlinear, phase_shift=float(ph)))
        elif branch == "linear":
            c = replace(cfg, linear=replace(cfg.linear, phase_shift=float(ph)))
        else:
            raise ValueError(f"unknown branch {branch!r}")
        try:
            means[i] = steady_mean(c)
        except NumericalAbort:
            means[i] = np.inf
    return phases, means


def _check_contrast(means, branch):
    lo, hi = float(np.min(means)), float(np.max(means))
    if not (hi >= 1.2 * lo):
        raise CalibrationError(
            f"flat phase response on the {branch} branch (max/min = {hi / lo:.3f} < 1.2); "
            "branch ineffective at current gains"
        )


def phase_scans(cfg: EngineConfig, n_points: int = 16):
    """Both calibration scans: (cooling, amplifying, phases, nonlinear_means, linear_means).

    The nonlinear scan runs with the linear branch off; the linear scan then
    runs with the nonlinear branch at the cooling phase just found.
    """
    ph, m_nl = scan_phase(cfg.with_depth(0.0), "nonlinear", n_points)
    _check_contrast(m_nl, "nonlinear")
    cooling = float(ph[int(np.argmin(m_nl))])
    cfg_lin = replace(cfg, nonlinear=replace(cfg.nonlinear, phase_shift=cooling))
    _, m_lin = scan_phase(cfg_lin, "linear", n_points)
    _check_contrast(m_lin, "linear")
    amplifying = float(ph[int(np.argmax(m_lin))])
    return cooling, amplifying, ph, m_nl, m_lin


def calibrate_phases(cfg: EngineConfig, n_points: int = 16):
    """Return (cooling phase of the nonlinear branch, amplifying phase of the linear branch)."""
    return phase_scans(cfg, n_points)[:2]


# ---------------------------------------------------------------- parameter bridge


@dataclass(frozen=True)
class Bridge:
    """Rate-model parameters measured on the full engine.

    loss: Gamma = -(net rate with the linear branch off)
    diffusion: D = Gamma * thermal mean (feedback off)
    sat: eta fitted so the oracle mean matches one above-threshold run
    gains: G per calibrated depth
    """

    loss: float
    diffusion: float
    sat: float
    gains: dict

    def params(self, depth: float):
        return RateParams(self.gains[depth], self.loss, self.sat, self.diffusion)

    def predicted_mean(self, depth: float) -> float:
        return steady_state_mean(self.params(depth))


def bridge_parameters(cfg: EngineConfig, fit_depth: float, depths=(), thermal_mean=None) -> Bridge:
    """Calibrate (G, Gamma, eta, D) on the engine configured by ``cfg``.

    ``cfg`` must hold the nonlinear branch at its cooling phase and gain;
    ``fit_depth`` must be above threshold.
    """
    loss = -measure_net_rate(cfg, 0.0).slope
    if thermal_mean is None:
        thermal_mean = steady_mean(cfg.with_depth(0.0).with_nonlinear_gain(0.0))
    diffusion = loss * thermal_mean
    gains = {d: calibrate_linear_rate(cfg, d) for d in {fit_depth, *depths}}
    fit_mean = steady_mean(cfg.with_depth(fit_depth))
    sat = fit_saturation(gains[fit_depth], loss, diffusion, fit_mean)
    return Bridge(loss, diffusion, sat, gains)
