"""Reduced rate-equation model of the phonon laser.

    dn = [(G - Gamma) n - eta n**2 + D] dt + sqrt(2 D n) dW

G is the linear amplification rate, Gamma the total linear loss, eta the
saturation (nonlinear cooling) coefficient and D the spontaneous drive. The
stationary density is

    P(n) ~ exp[((G - Gamma) n - eta n**2 / 2) / D]

which is exponential (thermal) below threshold and a Gaussian truncated at
n = 0, mode (G - Gamma)/eta and variance D/eta, far above it. The model is
classical and continuous: moments such as <n(n-1)> are meaningful for <n> >> 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.optimize import brentq

from .analysis import PhononDistribution
from .errors import ConfigError, StabilityError

SUPPORT_LOG_DROP = 30.0  # exp(-30) ~ 1e-13 < 1e-12 of the peak
MAX_RATE_DT = 0.01


@dataclass(frozen=True)
class RateParams:
    gain: float  # G, 1/s
    loss: float  # Gamma, 1/s
    sat: float  # eta, 1/(s * phonon)
    diffusion: float  # D, phonons/s

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.gain, self.loss, self.sat, self.diffusion)):
            raise ConfigError("rate parameters must be finite")
        if self.loss < 0:
            raise ConfigError("loss must be >= 0")
        if self.sat < 0:
            raise ConfigError("sat must be >= 0")
        if not self.diffusion > 0:
            raise ConfigError("diffusion must be > 0")

    @property
    def net(self) -> float:
        return self.gain - self.loss

    @property
    def normalizable(self) -> bool:
        return self.sat > 0 or self.net < 0


def _check(p: RateParams):
    if not p.normalizable:
        raise ConfigError(
            f"non-normalizable rate parameters: gain {p.gain} >= loss {p.loss} with sat = 0"
        )


def support_max(p: RateParams) -> float:
    """Smallest n beyond which the density has fallen below exp(-30) of its peak."""
    _check(p)
    a = p.sat / (2 * p.diffusion)
    b = p.net / p.diffusion
    if a == 0:
        return SUPPORT_LOG_DROP / -b
    f_max = b * b / (4 * a) if b > 0 else 0.0
    c = f_max - SUPPORT_LOG_DROP
    return (b + math.sqrt(b * b - 4 * a * c)) / (2 * a)


def log_density(p: RateParams, n):
    """Unnormalized log stationary density."""
    n = np.asarray(n, dtype=float)
    return (p.net * n - 0.5 * p.sat * n * n) / p.diffusion


def steady_state_distribution(p: RateParams, n_max: float | None = None, n_points: int = 100_001) -> PhononDistribution:
    """Normalized stationary density on a uniform grid over [0, n_max].

    Moments come from trapezoidal quadrature of the density; ``probabilities``
    are per-interval masses (trapezoid rule), so they sum to one.
    """
    _check(p)
    if n_max is None:
        n_max = support_max(p)
    grid = np.linspace(0.0, n_max, n_points)
    f = log_density(p, grid)
    dens = np.exp(f - f.max())
    z = trapezoid(dens, grid)
    dens /= z
    if dens[-1] > 1e-12 * dens.max():
        raise ConfigError(f"n_max = {n_max} truncates the density (P(n_max)/max P = {dens[-1] / dens.max():.3g})")
    mean = trapezoid(grid * dens, grid)
    second = trapezoid(grid * grid * dens, grid)
    cum = np.concatenate([[0.0], cumulative_trapezoid(dens, grid)])
    masses = np.diff(cum)
    masses /= masses.sum()
    return PhononDistribution(
        bin_edges=grid,
        probabilities=masses,
        mean=float(mean),
        variance=float(second - mean * mean),
        g2_zero=float((second - mean) / mean**2),
        sample_count=0,
        density=dens,
    )


def g2_from_params(p: RateParams) -> float:
    """Zero-delay normally ordered correlation <n(n-1)>/<n>**2 of the stationary state."""
    return steady_state_distribution(p).g2_zero


def steady_state_mean(p: RateParams) -> float:
    return steady_state_distribution(p, n_points=20_001).mean


def fit_saturation(gain: float, loss: float, diffusion: float, measured_mean: float) -> float:
    """eta such that the stationary mean equals ``measured_mean`` (above threshold)."""
    if not gain > loss:
        raise ConfigError("saturation fit needs an above-threshold operating point (gain > loss)")

    def resid(log_eta):
        return steady_state_mean(RateParams(gain, loss, math.exp(log_eta), diffusion)) - measured_mean

    guess = math.log((gain - loss) / measured_mean)
    return math.exp(brentq(resid, guess - 5, guess + 5, xtol=1e-10))


def _typical_n(p: RateParams, n0: float) -> float:
    typ = n0
    if p.normalizable:
        typ = max(typ, steady_state_mean(p))
    return typ


def _check_step(p: RateParams, dt: float, n0: float):
    if not dt > 0:
        raise StabilityError("dt must be > 0")
    rate = max(p.loss, p.gain, p.sat * _typical_n(p, n0))
    if dt * rate > MAX_RATE_DT * (1 + 1e-12):
        raise StabilityError(
            f"dt*max(loss, gain, sat*n) = {dt * rate:.3g} exceeds the stability bound {MAX_RATE_DT}"
        )


@njit(cache=True)
def _em_path(net, sat, diff, n0, dt, n_steps, stride, xi):
    out = np.empty(n_steps // stride + 1)
    out[0] = n0
    n = n0
    j = 1
    sq = math.sqrt(dt)
    for k in range(n_steps):
        n = n + (net * n - sat * n * n + diff) * dt + math.sqrt(2.0 * diff * n) * sq * xi[k]
        n = abs(n)
        if (k + 1) % stride == 0:
            out[j] = n
            j += 1
    return out


def sde_trajectory(p: RateParams, n0: float, dt: float, duration: float, seed: int, stride: int = 1):
    """Euler-Maruyama path with reflection at n = 0. Returns ``(t, n)``."""
    _check_step(p, dt, n0)
    n_steps = int(round(duration / dt))
    xi = np.random.Generator(np.random.PCG64(seed)).standard_normal(n_steps)
    n = _em_path(p.net, p.sat, p.diffusion, float(n0), dt, n_steps, stride, xi)
    t = dt * stride * np.arange(len(n))
    return t, n


@njit(cache=True)
def _em_ensemble(net, sat, diff, n, dt, n_steps, seed):
    np.random.seed(seed)
    sq = math.sqrt(dt)
    for k in range(n_steps):
        for i in range(n.shape[0]):
            m = n[i]
            m = m + (net * m - sat * m * m + diff) * dt + math.sqrt(2.0 * diff * m) * sq * np.random.standard_normal()
            n[i] = abs(m)
    return n


def sde_ensemble(p: RateParams, n0: float, dt: float, duration: float, n_paths: int, seed: int) -> np.ndarray:
    """Final values of ``n_paths`` independent reflected paths started at ``n0``."""
    _check_step(p, dt, n0)
    n_steps = int(round(duration / dt))
    seed32 = int(np.random.SeedSequence(seed).generate_state(1)[0])
    return _em_ensemble(p.net, p.sat, p.diffusion, np.full(n_paths, float(n0)), dt, n_steps, seed32)
