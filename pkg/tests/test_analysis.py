import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phonolase import analysis
from phonolase.analysis import IQSeries
from phonolase.dynamics import TrapConfig, simulate_free
from phonolase.errors import CalibrationError
from phonolase.oracle import RateParams, steady_state_distribution, steady_state_mean

FS = 2e6


# ---------------------------------------------------------------- phonon statistics


def test_histogram_exponential():
    n = np.random.default_rng(0).exponential(1000.0, 100_000)
    d = analysis.phonon_histogram(n)
    assert d.g2_zero == pytest.approx(2.0, abs=0.05)
    assert d.variance / d.mean**2 == pytest.approx(1.0, abs=0.05)
    assert d.probabilities.sum() == pytest.approx(1.0, abs=1e-9)
    assert d.sample_count == n.size


def test_histogram_constant():
    d = analysis.phonon_histogram(np.full(1000, 500.0))
    assert d.g2_zero == pytest.approx(499 * 500 / 500**2, abs=1e-12)
    assert d.variance == 0.0


def test_histogram_moments_from_raw_samples():
    n = np.random.default_rng(1).gamma(3.0, 50.0, 5000)
    d = analysis.phonon_histogram(n, bins=7)
    assert d.mean == pytest.approx(n.mean(), rel=1e-12)
    assert d.variance == pytest.approx(n.var(), rel=1e-12)


def test_histogram_too_few():
    with pytest.raises(ValueError, match="100"):
        analysis.phonon_histogram(np.ones(99))


def sample_closed_form(dist, size, seed):
    u = np.random.default_rng(seed).random(size)
    cum = np.concatenate([[0.0], np.cumsum(dist.probabilities)])
    return np.interp(u, cum, dist.bin_edges)


def test_histogram_of_oracle_samples():
    dist = steady_state_distribution(RateParams(3.0, 1.0, 1e-4, 1e3))
    samples = sample_closed_form(dist, 10_000, 2)
    h = analysis.phonon_histogram(samples, bins=60)
    assert analysis.ks_distance(samples, dist) < 0.03
    assert h.mean == pytest.approx(dist.mean, rel=0.01)


def test_decorrelation_stride():
    assert analysis.decorrelation_stride(1e-6, 1e3) == 1000
    assert analysis.decorrelation_stride(1.0, 1e3) == 1


# ---------------------------------------------------------------- lock-in


F_REF = 125e3
TAU = 20 / F_REF


def lockin_tone(amp, phase, freq=F_REF, n=40_000):
    t = np.arange(n) / FS
    return analysis.lock_in(amp * np.cos(2 * np.pi * freq * t + phase), F_REF, TAU, FS)


def settled(iq):
    return iq.i[-2000:].mean(), iq.q[-2000:].mean()


def test_lock_in_in_phase():
    i, q = settled(lockin_tone(3e-9, 0.0))
    assert i == pytest.approx(3e-9, rel=0.01)
    assert abs(q) < 0.01 * 3e-9


def test_lock_in_quadrature():
    i, q = settled(lockin_tone(3e-9, math.pi / 2))
    assert abs(i) < 0.01 * 3e-9
    assert q == pytest.approx(3e-9, rel=0.01)


def test_lock_in_off_frequency():
    on = np.hypot(*settled(lockin_tone(3e-9, 0.0)))
    off_iq = lockin_tone(3e-9, 0.0, freq=F_REF + 100 / TAU, n=200_000)
    off = np.max(np.hypot(off_iq.i, off_iq.q)[-20_000:])
    assert 20 * math.log10(off / on) <= -30


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(1e-10, 1e-6))
def test_lock_in_rotates_with_input_phase(phase, amp):
    i0, q0 = settled(lockin_tone(amp, 0.3))
    i1, q1 = settled(lockin_tone(amp, 0.3 + phase))
    assert math.hypot(i1, q1) == pytest.approx(math.hypot(i0, q0), rel=1e-3)
    rot = math.atan2(q1, i1) - math.atan2(q0, i0)
    assert math.remainder(rot - phase, 2 * math.pi) == pytest.approx(0.0, abs=1e-3)


def test_lock_in_linear():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal(5000), rng.standard_normal(5000)
    la, lb = analysis.lock_in(a, F_REF, TAU, FS), analysis.lock_in(b, F_REF, TAU, FS)
    lab = analysis.lock_in(2 * a - 3 * b, F_REF, TAU, FS)
    assert np.allclose(lab.i, 2 * la.i - 3 * lb.i, atol=1e-12)
    assert np.allclose(lab.q, 2 * la.q - 3 * lb.q, atol=1e-12)


def test_lock_in_preconditions():
    with pytest.raises(ValueError, match="tau"):
        analysis.lock_in(np.zeros(10), F_REF, 1 / F_REF, FS)
    with pytest.raises(ValueError):
        analysis.lock_in(np.zeros(10), 1.5e6, 1.0, FS)


# ---------------------------------------------------------------- radial statistics


def iq_of(i, q):
    return IQSeries(np.arange(len(i), dtype=float), np.asarray(i), np.asarray(q))


def test_radial_thermal():
    rng = np.random.default_rng(4)
    iq = iq_of(rng.normal(0, 2e-9, 20_000), rng.normal(0, 2e-9, 20_000))
    peak, score = analysis.radial_statistics(iq)
    assert score == pytest.approx(1.0, abs=0.1)
    assert peak == pytest.approx(2e-9, rel=0.1)  # Rayleigh mode = sigma


def test_radial_annulus():
    ph = np.random.default_rng(5).uniform(0, 2 * np.pi, 5000)
    peak, score = analysis.radial_statistics(iq_of(7e-9 * np.cos(ph), 7e-9 * np.sin(ph)))
    assert score == pytest.approx(0.0, abs=0.02)
    assert peak == pytest.approx(7e-9, rel=0.02)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(1e-3, 1e3))
def test_radial_invariance(angle, scale):
    rng = np.random.default_rng(6)
    i, q = rng.normal(1.0, 1.0, 2000), rng.normal(0.0, 0.5, 2000)
    _, base = analysis.radial_statistics(iq_of(i, q))
    c, s = math.cos(angle), math.sin(angle)
    _, rot = analysis.radial_statistics(iq_of(scale * (c * i - s * q), scale * (s * i + c * q)))
    assert rot == pytest.approx(base, rel=1e-9)


def test_radial_errors():
    with pytest.raises(ValueError, match="degenerate"):
        analysis.radial_statistics(iq_of(np.zeros(2000), np.zeros(2000)))
    with pytest.raises(ValueError, match="1000"):
        analysis.radial_statistics(iq_of(np.ones(999), np.ones(999)))


# ---------------------------------------------------------------- Welch


def test_welch_tone():
    n, seg = 400_000, 20_000
    t = np.arange(n) / FS
    est = analysis.welch_psd(1e-9 * np.sin(2 * np.pi * 125e3 * t), FS, seg)
    df = FS / seg
    assert abs(est.peak_freq - 125e3) <= df
    assert est.total_power == pytest.approx(0.5e-18, rel=0.03)
    assert np.all(est.psd >= 0) and np.all(np.diff(est.freqs) > 0)


def test_welch_white_noise():
    level = 1e-24
    x = math.sqrt(level * FS / 2) * np.random.default_rng(7).standard_normal(1_000_000)
    est = analysis.welch_psd(x, FS, 1024)
    band = (est.freqs > 0.05 * FS) & (est.freqs < 0.45 * FS)
    assert np.all(np.abs(est.psd[band] / level - 1) < 0.10)
    assert est.total_power == pytest.approx(x.var(), rel=0.03)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e3, 9e5), st.sampled_from([256, 1024, 4096]))
def test_welch_parseval(seed, freq, seg):
    rng = np.random.default_rng(seed)
    n = 40 * seg
    t = np.arange(n) / FS
    x = rng.uniform(0.1, 2) * np.cos(2 * np.pi * freq * t + rng.uniform(0, 6)) + rng.uniform(0, 1) * rng.standard_normal(n)
    est = analysis.welch_psd(x, FS, seg)
    assert est.total_power == pytest.approx(np.var(x), rel=0.03)


def test_welch_thermal_linewidth():
    f0, fg = 125e3, 500.0
    trap = TrapConfig(omega0=2 * math.pi * f0, gamma=2 * math.pi * fg)
    fs = 128 * f0
    _, x, _ = simulate_free(trap, 1 / fs, int(1.0 * fs), np.random.default_rng(8), stride=8)
    est = analysis.welch_psd(x[len(x) // 20 :], fs / 8, 50_000)
    assert est.linewidth == pytest.approx(fg, rel=0.20)
    assert est.peak_freq == pytest.approx(f0, abs=fg)


def test_welch_too_short():
    with pytest.raises(ValueError, match="4 segments"):
        analysis.welch_psd(np.zeros(1000), FS, 512)


# ---------------------------------------------------------------- threshold


def test_threshold_synthetic_knee():
    d = np.linspace(0.0, 0.02, 11)
    m = np.where(d < 0.01, 100 + 1e3 * d, 110 + 1e6 * (d - 0.01))
    g2 = np.where(d < 0.01, 2.0, 1.0)
    res = analysis.detect_threshold(list(zip(d, m, g2)))
    assert res.depth == pytest.approx(0.01, abs=0.5 * (d[1] - d[0]))
    assert res.g2_consistent


def test_threshold_oracle_sweep():
    loss, slope, sat, diff = 2 * math.pi * 500, 2 * math.pi * 500 / 0.008, 1e-3, 2 * math.pi * 500 * 1e4
    depths = np.linspace(0.0, 0.02, 10)
    rows = []
    for d in depths:
        p = RateParams(slope * d, loss, sat, diff)
        dist = steady_state_distribution(p)
        rows.append((d, dist.mean, dist.g2_zero))
    res = analysis.detect_threshold(rows)
    assert res.depth == pytest.approx(loss / slope, rel=0.10)
    assert res.g2_consistent


def oracle_knee(sat):
    loss, slope, diff = 1.0, 100.0, 1e4
    depths = np.linspace(0.0, 0.03, 12)
    return analysis.detect_threshold(
        [(d, steady_state_mean(RateParams(slope * d, loss, sat, diff)), 1.0) for d in depths]
    ).depth


def test_cooling_gain_moves_knee():
    assert oracle_knee(2e-6) > oracle_knee(2e-8)


def test_threshold_errors():
    d = np.linspace(0, 1, 10)
    with pytest.raises(CalibrationError, match="no knee"):
        analysis.detect_threshold(list(zip(d, 5 + 3 * d, np.full(10, 2.0))))
    with pytest.raises(ValueError, match="8"):
        analysis.detect_threshold([(0, 1, 2)] * 7)


# ---------------------------------------------------------------- transients


def test_fit_log_rate_and_rising_edge():
    t = np.linspace(0, 5, 501)
    n = np.minimum(np.exp(2.0 * t), 1e3) + 0.0
    fit = analysis.fit_log_rate(t, n, 1.0, 500.0)
    assert fit.slope == pytest.approx(2.0, rel=1e-9)
    edge = analysis.rising_edge_fit(t, np.concatenate([[50.0], n[1:]]), 5.0, 100.0)
    assert edge.slope == pytest.approx(2.0, rel=0.02)
    assert analysis.first_crossing(t, n, 100.0) == pytest.approx(math.log(100) / 2, abs=0.01)
    with pytest.raises(CalibrationError):
        analysis.fit_log_rate(t, n, 1e4, 1e5)
