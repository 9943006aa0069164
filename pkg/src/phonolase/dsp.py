"""Streaming models of the feedback electronics.

Every block is a pair: a numba kernel operating on a small float64 state
array (used directly by the closed-loop engine) and a thin Python class that
owns such an array for standalone use. Blocks are causal, constant-memory and
sample-by-sample.

Nonlinear branch:  detector -> bandpass -> doubler -> phase shifter -> gain
Linear branch:     detector -> PLL -> 2x tracked phase + shift -> depth
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError

TWO_PI = 2.0 * math.pi
LOCK_THRESHOLD = 0.2  # rad, low-passed |phase error|
LOCK_HOLD_CYCLES = 10.0  # in units of 1/pll_bandwidth
PD_CUTOFF_RATIO = 10.0  # phase-detector low-pass cutoff / loop bandwidth
LOCK_FILTER_RATIO = 0.5  # lock-detector low-pass cutoff / loop bandwidth
DOUBLER_HP_RATIO = 0.1  # doubler d.c.-removal corner / bandpass center


@dataclass(frozen=True)
class DetectorConfig:
    sensitivity: float = 1e-12  # m/sqrt(Hz), white one-sided floor
    sample_rate: float = 128 * 125e3

    def __post_init__(self):
        if not self.sensitivity >= 0:
            raise ConfigError("detector.sensitivity must be >= 0")
        if not self.sample_rate > 0:
            raise ConfigError("detector.sample_rate must be > 0")

    @property
    def noise_rms(self) -> float:
        return self.sensitivity * math.sqrt(self.sample_rate / 2.0)


@dataclass(frozen=True)
class NonlinearBranchConfig:
    """Bandpass -> frequency doubler -> phase shift -> gain.

    ``gain`` multiplies the doubled signal normalized by ``ref_amplitude**2``;
    ``ref_amplitude = 0`` selects the trap's thermal RMS amplitude.
    """

    bp_center: float = 125e3
    bp_q: float = 10.0
    phase_shift: float = 0.5 * math.pi
    gain: float = 0.0
    ref_amplitude: float = 0.0

    def __post_init__(self):
        if not self.bp_center > 0:
            raise ConfigError("nonlinear.bp_center must be > 0")
        if not self.bp_q > 0:
            raise ConfigError("nonlinear.bp_q must be > 0")
        if not self.gain >= 0:
            raise ConfigError("nonlinear.gain must be >= 0")
        if not self.ref_amplitude >= 0:
            raise ConfigError("nonlinear.ref_amplitude must be >= 0")
        if not math.isfinite(self.phase_shift):
            raise ConfigError("nonlinear.phase_shift must be finite")


@dataclass(frozen=True)
class LinearBranchConfig:
    pll_center: float = 125e3
    pll_bandwidth: float = 2e3
    pll_damping: float = 1 / math.sqrt(2)
    phase_shift: float = 1.5 * math.pi
    depth: float = 0.0

    def __post_init__(self):
        if not self.pll_center > 0:
            raise ConfigError("linear.pll_center must be > 0")
        if not 0 < self.pll_bandwidth < self.pll_center / 10:
            raise ConfigError("linear.pll_bandwidth must satisfy 0 < bandwidth < pll_center/10")
        if not self.pll_damping > 0:
            raise ConfigError("linear.pll_damping must be > 0")
        if not self.depth >= 0:
            raise ConfigError("linear.depth must be >= 0")
        if not math.isfinite(self.phase_shift):
            raise ConfigError("linear.phase_shift must be finite")


# ---------------------------------------------------------------- detector


def detect(x, det: DetectorConfig, noise_draw):
    """Displacement reading with white noise whose one-sided PSD is sensitivity**2."""
    return x + det.noise_rms * noise_draw


# ---------------------------------------------------------------- bandpass


def bandpass_coefficients(center: float, q: float, sample_rate: float) -> np.ndarray:
    """Constant-peak-gain resonator: returns normalized ``[b0, b2, a1, a2]`` (b1 = 0)."""
    if not 0 < center < sample_rate / 2:
        raise ConfigError(f"bandpass center {center} Hz outside (0, {sample_rate / 2}) Hz")
    if not q > 0:
        raise ConfigError("bandpass q must be > 0")
    w0 = TWO_PI * center / sample_rate
    alpha = math.sin(w0) / (2.0 * q)
    a0 = 1.0 + alpha
    return np.array([alpha / a0, -alpha / a0, -2.0 * math.cos(w0) / a0, (1.0 - alpha) / a0])


@njit(cache=True)
def bandpass_kernel(c, s, x):
    # transposed direct form II, b1 = 0
    y = c[0] * x + s[0]
    s[0] = -c[2] * y + s[1]
    s[1] = c[1] * x - c[3] * y
    return y


class Bandpass:
    def __init__(self, center: float, q: float, sample_rate: float):
        self.coef = bandpass_coefficients(center, q, sample_rate)
        self.state = np.zeros(2)

    def reset(self):
        self.state[:] = 0.0

    def step(self, sample: float) -> float:
        return bandpass_kernel(self.coef, self.state, sample)

    def process(self, samples) -> np.ndarray:
        return _run_bandpass(self.coef, self.state, np.asarray(samples, dtype=float))

    def response(self, freq: float, sample_rate: float) -> complex:
        """Complex transfer function evaluated at ``freq``."""
        b0, b2, a1, a2 = self.coef
        z1 = np.exp(-1j * TWO_PI * freq / sample_rate)
        return (b0 + b2 * z1 * z1) / (1 + a1 * z1 + a2 * z1 * z1)


@njit(cache=True)
def _run_bandpass(c, s, xs):
    out = np.empty_like(xs)
    for k in range(xs.shape[0]):
        out[k] = bandpass_kernel(c, s, xs[k])
    return out


# ---------------------------------------------------------------- doubler


@njit(cache=True)
def doubler_kernel(alpha, s, x):
    sq = x * x
    y = sq - s[0]
    s[0] += alpha * (sq - s[0])
    return y


class FrequencyDoubler:
    """Square law followed by one-pole d.c. removal at ``cutoff`` Hz.

    The output keeps the A**2 amplitude dependence: cos input of amplitude A
    settles to (A**2/2) cos(2*Omega*t).
    """

    def __init__(self, cutoff: float, sample_rate: float):
        if not 0 < cutoff < sample_rate / 2:
            raise ConfigError("doubler cutoff must lie in (0, sample_rate/2)")
        self.alpha = 1.0 - math.exp(-TWO_PI * cutoff / sample_rate)
        self.state = np.zeros(1)

    def reset(self):
        self.state[:] = 0.0

    def step(self, sample: float) -> float:
        return doubler_kernel(self.alpha, self.state, sample)

    def process(self, samples) -> np.ndarray:
        return _run_doubler(self.alpha, self.state, np.asarray(samples, dtype=float))


@njit(cache=True)
def _run_doubler(alpha, s, xs):
    out = np.empty_like(xs)
    for k in range(xs.shape[0]):
        out[k] = doubler_kernel(alpha, s, xs[k])
    return out


# ---------------------------------------------------------------- phase shifter


def phase_delay_samples(theta: float, carrier: float, sample_rate: float) -> float:
    """Delay (in samples) that advances a tone at ``carrier`` by ``theta``.

    A delay of tau turns cos(w t) into cos(w t - w tau), so a phase advance
    theta is the delay ((-theta) mod 2pi) / (2pi carrier).
    """
    if not 0 < carrier < sample_rate / 2:
        raise ConfigError(f"phase-shift carrier {carrier} Hz outside (0, {sample_rate / 2}) Hz")
    lag = (-theta) % TWO_PI
    if TWO_PI - lag < 1e-12:
        lag = 0.0
    return lag / (TWO_PI * carrier) * sample_rate


def delay_line_state(max_delay: float) -> np.ndarray:
    # layout: [write_index, buf_0 ... buf_{L-1}]
    length = int(math.ceil(max_delay)) + 2
    return np.zeros(length + 1)


@njit(cache=True)
def delay_kernel(delay, s, x):
    n = s.shape[0] - 1
    w = int(s[0])
    s[1 + w] = x
    i0 = int(delay)
    frac = delay - i0
    a = s[1 + (w - i0) % n]
    y = a
    if frac > 0.0:
        b = s[1 + (w - i0 - 1) % n]
        y = a + frac * (b - a)
    s[0] = (w + 1) % n
    return y


class PhaseShifter:
    """Narrowband phase shift by interpolated fractional delay.

    Exact at ``carrier`` up to linear-interpolation error (amplitude loss of
    at most 1 - cos(pi * f / sample_rate)); off-carrier components get a
    frequency-proportional phase instead of ``theta``.
    """

    def __init__(self, theta: float, carrier: float, sample_rate: float):
        self.delay = phase_delay_samples(theta, carrier, sample_rate)
        self.state = delay_line_state(sample_rate / carrier)

    def reset(self):
        self.state[:] = 0.0

    def step(self, sample: float) -> float:
        return delay_kernel(self.delay, self.state, sample)

    def process(self, samples) -> np.ndarray:
        return _run_delay(self.delay, self.state, np.asarray(samples, dtype=float))


@njit(cache=True)
def _run_delay(delay, s, xs):
    out = np.empty_like(xs)
    for k in range(xs.shape[0]):
        out[k] = delay_kernel(delay, s, xs[k])
    return out


# ---------------------------------------------------------------- PLL

# state layout
_PH, _INT, _I1, _Q1, _I2, _Q2, _ELP, _CNT, _LCK, _ERR = range(10)
PLL_STATE_SIZE = 10


@dataclass(frozen=True)
class PllState:
    phase: float
    freq_estimate: float
    integrator: float
    locked: bool

    @classmethod
    def from_array(cls, center: float, s: np.ndarray) -> "PllState":
        return cls(float(s[_PH]), center + float(s[_INT]), float(s[_INT]), bool(s[_LCK] > 0.5))


def pll_parameters(cfg: LinearBranchConfig, sample_rate: float) -> np.ndarray:
    """Loop constants for a type-2 PI loop with natural frequency ``pll_bandwidth``.

    Linearized, s**2 + 2*zeta*wn*s + wn**2 with wn = 2pi*bandwidth:
    proportional path ``2*zeta*bandwidth`` Hz/rad, integral ``2pi*bandwidth**2`` Hz/s/rad.
    """
    if not cfg.pll_center < sample_rate / 2:
        raise ConfigError("pll_center must be below Nyquist")
    dt = 1.0 / sample_rate
    bw = cfg.pll_bandwidth
    kp = 2.0 * cfg.pll_damping * bw
    ki = TWO_PI * bw * bw
    a_pd = 1.0 - math.exp(-TWO_PI * PD_CUTOFF_RATIO * bw * dt)
    a_lock = 1.0 - math.exp(-TWO_PI * LOCK_FILTER_RATIO * bw * dt)
    hold = LOCK_HOLD_CYCLES / bw * sample_rate
    return np.array([cfg.pll_center, kp, ki, a_pd, a_lock, dt, hold, LOCK_THRESHOLD])


def pll_initial_state(phase: float = 0.0, amplitude: float | None = None) -> np.ndarray:
    """Fresh loop state, out of lock; with ``amplitude`` the phase detector starts
    charged as if already locked to a tone of that amplitude at zero phase error."""
    s = np.zeros(PLL_STATE_SIZE)
    s[_PH] = phase % TWO_PI
    s[_ELP] = math.pi / 2
    if amplitude is not None:
        s[_I1] = s[_I2] = 0.5 * amplitude
        s[_ELP] = 0.0
    return s


@njit(cache=True)
def pll_kernel(p, s, x):
    center, kp, ki, a_pd, a_lock, dt, hold, thresh = p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7]
    ph = s[_PH]
    c = math.cos(ph)
    sn = math.sin(ph)
    s[_I1] += a_pd * (x * c - s[_I1])
    s[_Q1] += a_pd * (-x * sn - s[_Q1])
    s[_I2] += a_pd * (s[_I1] - s[_I2])
    s[_Q2] += a_pd * (s[_Q1] - s[_Q2])
    err = math.atan2(s[_Q2], s[_I2])
    s[_ERR] = err
    s[_INT] += ki * err * dt
    freq = center + s[_INT] + kp * err
    ph += TWO_PI * freq * dt
    ph = ph % TWO_PI
    s[_PH] = ph
    s[_ELP] += a_lock * (abs(err) - s[_ELP])
    if s[_ELP] < thresh:
        s[_CNT] += 1.0
    else:
        s[_CNT] = 0.0
    s[_LCK] = 1.0 if s[_CNT] >= hold else 0.0
    return c


class PLL:
    """Phase-locked loop: I/Q phase detector (two-pole low-passed, atan2),
    proportional-integral loop filter, numerically controlled oscillator.

    ``step`` returns the unit reference cos(phase) aligned with the input
    sample and advances the oscillator. Lock is declared once the low-passed
    |phase error| stays below 0.2 rad for 10/bandwidth seconds.
    """

    def __init__(self, cfg: LinearBranchConfig, sample_rate: float, phase: float = 0.0,
                 amplitude: float | None = None):
        self.cfg = cfg
        self.params = pll_parameters(cfg, sample_rate)
        self._init = (phase, amplitude)
        self.state = pll_initial_state(phase, amplitude)

    def reset(self):
        self.state[:] = pll_initial_state(*self._init)

    def step(self, sample: float) -> float:
        return pll_kernel(self.params, self.state, sample)

    @property
    def snapshot(self) -> PllState:
        return PllState.from_array(self.cfg.pll_center, self.state)

    def process(self, samples):
        """Run over an array; returns (reference, freq_estimate, locked) arrays."""
        return _run_pll(self.params, self.state, np.asarray(samples, dtype=float))


def pll_step(sample: float, state: np.ndarray, cfg: LinearBranchConfig, sample_rate: float):
    """Functional form: advances ``state`` in place, returns (PllState, reference)."""
    ref = pll_kernel(pll_parameters(cfg, sample_rate), state, sample)
    return PllState.from_array(cfg.pll_center, state), ref


@njit(cache=True)
def _run_pll(p, s, xs):
    n = xs.shape[0]
    ref = np.empty(n)
    freq = np.empty(n)
    locked = np.empty(n, dtype=np.bool_)
    for k in range(n):
        ref[k] = pll_kernel(p, s, xs[k])
        freq[k] = p[0] + s[_INT]
        locked[k] = s[_LCK] > 0.5
    return ref, freq, locked


# ---------------------------------------------------------------- summer / EOM


@njit(cache=True)
def combine_and_limit(u_nl, u_lin, u_max):
    u = u_nl + u_lin
    if u > u_max:
        return u_max
    if u < -u_max:
        return -u_max
    return u
