"""Stochastic dynamics of the trapped nanosphere along one axis.

Equation of motion, with ``u`` the fractional stiffness modulation set by
the feedback electronics::

    x'' = -omega0**2 * (1 + u) * x - gamma * x' + sqrt(2*gamma*kB*T/m) * xi(t)

Integrated with a velocity-first semi-implicit Euler-Maruyama step.

Default trap numbers (omega0 = 2pi*125 kHz, gamma = 2pi*100 Hz, T = 300 K)
are illustrative stand-ins, not measured values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigError, StabilityError

KB = 1.380649e-23
HBAR = 1.054571817e-34
SILICA_DENSITY = 2200.0
DEFAULT_DIAMETER = 150e-9
MAX_OMEGA_DT = 0.05


def default_mass_from_diameter(diameter: float, density: float = SILICA_DENSITY) -> float:
    """Mass of a homogeneous sphere, ``density * pi/6 * diameter**3``."""
    if not (diameter > 0 and density > 0):
        raise ConfigError(f"diameter and density must be positive (got {diameter}, {density})")
    return density * (math.pi / 6.0) * diameter**3


@dataclass(frozen=True)
class TrapConfig:
    mass: float = default_mass_from_diameter(DEFAULT_DIAMETER)
    omega0: float = 2 * math.pi * 125e3
    gamma: float = 2 * math.pi * 100.0
    temperature: float = 300.0
    hbar_eff: float = HBAR
    u_max: float = 0.5

    def __post_init__(self):
        vals = (self.mass, self.omega0, self.gamma, self.temperature, self.hbar_eff, self.u_max)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigError(f"non-finite trap parameter in {self}")
        if self.mass <= 0:
            raise ConfigError("trap.mass must be > 0")
        if self.omega0 <= 0:
            raise ConfigError("trap.omega0 must be > 0")
        if self.gamma < 0:
            raise ConfigError("trap.gamma must be >= 0")
        if self.temperature < 0:
            raise ConfigError("trap.temperature must be >= 0")
        if self.hbar_eff <= 0:
            raise ConfigError("trap.hbar_eff must be > 0")
        if not 0 <= self.u_max <= 1:
            raise ConfigError("trap.u_max must lie in [0, 1]")
        if self.gamma >= self.omega0:
            raise ConfigError("trap must be underdamped: gamma < omega0")

    @property
    def f0(self) -> float:
        return self.omega0 / (2 * math.pi)

    @property
    def thermal_energy(self) -> float:
        return KB * self.temperature

    @property
    def thermal_phonons(self) -> float:
        """Classical thermal occupation kB*T / (hbar_eff*omega0)."""
        return self.thermal_energy / (self.hbar_eff * self.omega0)

    @property
    def thermal_amplitude(self) -> float:
        """RMS displacement at equilibrium, sqrt(kB*T / (m*omega0**2))."""
        return math.sqrt(self.thermal_energy / (self.mass * self.omega0**2))

    @property
    def force_noise(self) -> float:
        """Velocity diffusion amplitude sqrt(2*gamma*kB*T/m), in m/s**1.5."""
        return math.sqrt(2.0 * self.gamma * self.thermal_energy / self.mass)

    def amplitude_for_phonons(self, n: float) -> float:
        """Displacement amplitude of a pure oscillation holding ``n`` phonons."""
        energy = self.hbar_eff * self.omega0 * (n + 0.5) if n > 0 else 0.0
        return math.sqrt(2.0 * energy / (self.mass * self.omega0**2))

    @classmethod
    def dimensionless(cls, thermal_phonons: float = 1e4, **kw) -> "TrapConfig":
        """Trap whose hbar_eff is rescaled so that kB*T/(hbar_eff*omega0) = thermal_phonons."""
        base = cls(**kw)
        hbar = base.thermal_energy / (base.omega0 * thermal_phonons)
        return cls(**{**kw, "hbar_eff": hbar})


@dataclass(frozen=True)
class OscillatorState:
    x: float = 0.0
    v: float = 0.0
    t: float = 0.0


@njit(cache=True)
def _advance(x, v, omega0_sq, u, gamma, dt, kick):
    # kick is the already-scaled velocity impulse sigma*sqrt(dt)*xi
    v = v + dt * (-omega0_sq * (1.0 + u) * x - gamma * v) + kick
    x = x + dt * v
    return x, v


@njit(cache=True)
def _phonons(x, v, mass, omega0, hbar_eff):
    energy = 0.5 * mass * (v * v + omega0 * omega0 * x * x)
    n = energy / (hbar_eff * omega0) - 0.5
    return n if n > 0.0 else 0.0


def check_time_step(omega0: float, dt: float) -> None:
    if not dt > 0:
        raise StabilityError(f"dt must be > 0 (got {dt})")
    if omega0 * dt > MAX_OMEGA_DT * (1 + 1e-12):
        raise StabilityError(
            f"omega0*dt = {omega0 * dt:.4g} exceeds the stability bound omega0*dt <= {MAX_OMEGA_DT}"
        )


def step_oscillator(
    state: OscillatorState, trap: TrapConfig, u: float, dt: float, noise_draw: float
) -> OscillatorState:
    """Advance the oscillator one time step under stiffness modulation ``u``.

    ``noise_draw`` is a standard-normal variate; the thermal velocity kick is
    ``sqrt(2*gamma*kB*T/m * dt) * noise_draw``.
    """
    if not all(math.isfinite(q) for q in (state.x, state.v, state.t, u, dt, noise_draw)):
        raise ValueError(f"non-finite input to step_oscillator: {state}, u={u}, dt={dt}")
    check_time_step(trap.omega0, dt)
    if abs(u) > trap.u_max:
        raise ValueError(f"|u| = {abs(u)} exceeds u_max = {trap.u_max}; clamp before stepping")
    kick = trap.force_noise * math.sqrt(dt) * noise_draw
    x, v = _advance(state.x, state.v, trap.omega0**2, u, trap.gamma, dt, kick)
    return OscillatorState(x, v, state.t + dt)


def phonon_number(state: OscillatorState, trap: TrapConfig) -> float:
    """Phonon occupation ``max(0, E/(hbar_eff*omega0) - 1/2)`` at the d.c. trap frequency."""
    return _phonons(state.x, state.v, trap.mass, trap.omega0, trap.hbar_eff)


def energy(state: OscillatorState, trap: TrapConfig) -> float:
    return 0.5 * trap.mass * (state.v**2 + trap.omega0**2 * state.x**2)


def simulate_free(
    trap: TrapConfig,
    dt: float,
    n_steps: int,
    rng: np.random.Generator,
    x0: float = 0.0,
    v0: float = 0.0,
    stride: int = 1,
):
    """Open-loop (u = 0) trajectory; returns ``(t, x, v)`` sampled every ``stride`` steps."""
    check_time_step(trap.omega0, dt)
    kicks = trap.force_noise * math.sqrt(dt) * rng.standard_normal(n_steps) if trap.temperature > 0 else np.zeros(n_steps)
    xs, vs = _free_run(x0, v0, trap.omega0**2, trap.gamma, dt, kicks, stride)
    t = dt * stride * np.arange(1, len(xs) + 1)
    return t, xs, vs


@njit(cache=True)
def _free_run(x, v, omega0_sq, gamma, dt, kicks, stride):
    n_out = kicks.shape[0] // stride
    xs = np.empty(n_out)
    vs = np.empty(n_out)
    j = 0
    for k in range(n_out * stride):
        x, v = _advance(x, v, omega0_sq, 0.0, gamma, dt, kicks[k])
        if (k + 1) % stride == 0:
            xs[j] = x
            vs[j] = v
            j += 1
    return xs, vs
