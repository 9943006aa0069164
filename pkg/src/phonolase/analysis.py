"""Observables computed from trajectories.

Phonon statistics, lock-in quadratures, phase-space radial statistics,
Welch spectra with Lorentzian linewidths, and threshold detection.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal, stats
from scipy.optimize import curve_fit

from .errors import CalibrationError

MIN_HISTOGRAM_SAMPLES = 100
MIN_RADIAL_SAMPLES = 1000
KNEE_SLOPE_RATIO = 10.0
G2_CROSSING = 1.5


# ---------------------------------------------------------------- phonon statistics


@dataclass
class PhononDistribution:
    bin_edges: np.ndarray
    probabilities: np.ndarray
    mean: float
    variance: float
    g2_zero: float
    sample_count: int
    density: np.ndarray | None = field(default=None, repr=False)  # analytic densities only

    def cdf(self, n):
        """Cumulative probability, linear between bin edges."""
        cum = np.concatenate([[0.0], np.cumsum(self.probabilities)])
        return np.interp(n, self.bin_edges, cum, left=0.0, right=1.0)


def g2_zero(samples) -> float:
    n = np.asarray(samples, dtype=float)
    m = n.mean()
    return float((np.mean(n * n) - m) / (m * m))


def phonon_histogram(data, bins=50) -> PhononDistribution:
    """Histogram of phonon-number samples (a TrajectoryRecord or an array).

    Moments use the raw samples. Samples should be decorrelated, i.e. spaced
    by at least 1/gamma; see :func:`decorrelation_stride`.
    """
    n = np.asarray(getattr(data, "n", data), dtype=float)
    if n.size < MIN_HISTOGRAM_SAMPLES:
        raise ValueError(f"{n.size} samples; at least {MIN_HISTOGRAM_SAMPLES} needed for a distribution")
    counts, edges = np.histogram(n, bins=bins)
    mean = float(n.mean())
    return PhononDistribution(
        bin_edges=edges,
        probabilities=counts / counts.sum(),
        mean=mean,
        variance=float(n.var()),
        g2_zero=g2_zero(n),
        sample_count=int(n.size),
    )


def decorrelation_stride(sample_interval: float, gamma: float) -> int:
    """Stride in samples so consecutive kept samples are >= 1/gamma apart."""
    return max(1, int(np.ceil(1.0 / (gamma * sample_interval) - 1e-9)))


def ks_exponential(samples) -> float:
    """KS distance between samples and an exponential with the sample mean."""
    n = np.asarray(samples, dtype=float)
    return float(stats.kstest(n, "expon", args=(0.0, n.mean())).statistic)


def ks_distance(samples, dist: PhononDistribution) -> float:
    return float(stats.kstest(np.asarray(samples, dtype=float), dist.cdf).statistic)


# ---------------------------------------------------------------- lock-in


@dataclass
class IQSeries:
    times: np.ndarray
    i: np.ndarray
    q: np.ndarray

    def decimate(self, every: int) -> "IQSeries":
        return IQSeries(self.times[::every], self.i[::every], self.q[::every])

    def after(self, t0: float) -> "IQSeries":
        m = self.times >= t0
        return IQSeries(self.times[m], self.i[m], self.q[m])


def lock_in(x, f_ref: float, tau: float, sample_rate: float, t0: float = 0.0) -> IQSeries:
    """Demodulate ``x`` against a reference at ``f_ref``.

    I = LP[2 x cos(2 pi f t)], Q = LP[-2 x sin(2 pi f t)] with a one-pole
    low-pass of time constant ``tau``; A cos(2 pi f t + phi) -> (A cos phi, A sin phi).
    """
    if not 0 < f_ref < sample_rate / 2:
        raise ValueError("f_ref must lie in (0, sample_rate/2)")
    if tau < 10.0 / f_ref:
        raise ValueError(f"tau = {tau} s shorter than 10/f_ref = {10.0 / f_ref} s")
    x = np.asarray(x, dtype=float)
    t = t0 + np.arange(x.size) / sample_rate
    arg = 2 * np.pi * f_ref * t
    alpha = -np.expm1(-1.0 / (sample_rate * tau))
    b, a = [alpha], [1.0, alpha - 1.0]
    i = signal.lfilter(b, a, 2.0 * x * np.cos(arg))
    q = signal.lfilter(b, a, -2.0 * x * np.sin(arg))
    return IQSeries(t, i, q)


def radial_statistics(iq: IQSeries):
    """Return ``(peak_radius, annulus_score)``.

    annulus_score = Var(r**2) / mean(r**2)**2: 1 for a thermal (Gaussian) cloud,
    near 0 for a narrow annulus. peak_radius is the mode of a Gaussian-KDE
    estimate of the radial density.
    """
    i = np.asarray(iq.i, dtype=float)
    q = np.asarray(iq.q, dtype=float)
    if i.size < MIN_RADIAL_SAMPLES:
        raise ValueError(f"{i.size} samples; at least {MIN_RADIAL_SAMPLES} needed")
    r2 = i * i + q * q
    m = r2.mean()
    if not m > 0:
        raise ValueError("degenerate all-zero I/Q series")
    score = float(r2.var() / (m * m))
    r = np.sqrt(r2)
    grid = np.linspace(0.0, r.max(), 1024)
    kde = stats.gaussian_kde(r)
    peak = float(grid[np.argmax(kde(grid))])
    return peak, score


# ---------------------------------------------------------------- spectra


@dataclass
class PsdEstimate:
    freqs: np.ndarray
    psd: np.ndarray
    linewidth: float | None
    peak_freq: float
    total_power: float  # sum(psd) * bin width
    fit_r2: float | None = None


def _lorentzian(f, amp, f0, hw, floor):
    return amp / (1.0 + ((f - f0) / hw) ** 2) + floor


def welch_psd(x, sample_rate: float, segment_length: int) -> PsdEstimate:
    """One-sided Welch PSD (Hann window, 50% overlap) with a Lorentzian linewidth.

    The fit window spans +-10 linewidth guesses around the peak, the guess
    being twice the spectral standard deviation over the region where the
    PSD exceeds a tenth of its peak. ``linewidth`` (FWHM) is None when the
    fit r**2 < 0.9.
    """
    x = np.asarray(x, dtype=float)
    L = int(segment_length)
    if L < 8 or x.size < L + 3 * (L // 2):
        raise ValueError(f"series of {x.size} samples is shorter than 4 segments of {L}")
    # global mean removal only: per-segment detrending would discard sub-bin content
    freqs, psd = signal.welch(x - x.mean(), fs=sample_rate, window="hann", nperseg=L, noverlap=L // 2,
                              detrend=False, scaling="density", return_onesided=True)
    df = freqs[1] - freqs[0]
    total = float(psd.sum() * df)
    k = int(np.argmax(psd[1:])) + 1
    peak = psd[k]

    lo = k
    while lo > 1 and psd[lo - 1] >= 0.1 * peak:
        lo -= 1
    hi = k
    while hi < psd.size - 1 and psd[hi + 1] >= 0.1 * peak:
        hi += 1
    w = psd[lo:hi + 1]
    f = freqs[lo:hi + 1]
    fc = np.sum(w * f) / np.sum(w)
    sigma = np.sqrt(np.sum(w * (f - fc) ** 2) / np.sum(w))
    guess = max(2.0 * sigma, df)
    half = max(10.0 * guess, 5 * df)
    m = np.abs(freqs - freqs[k]) <= half
    fw, pw = freqs[m], psd[m]

    linewidth, r2 = None, None
    fx, py = fw - freqs[k], pw / peak  # well-scaled fit variables
    try:
        p0 = (1.0, 0.0, guess / 2, float(np.min(py)))
        popt, _ = curve_fit(_lorentzian, fx, py, p0=p0,
                            bounds=([0, fx[0], df * 1e-3, 0], [np.inf, fx[-1], np.inf, np.inf]),
                            maxfev=20000)
        resid = py - _lorentzian(fx, *popt)
        r2 = 1.0 - float(np.sum(resid**2) / np.sum((py - py.mean()) ** 2))
        if r2 >= 0.9:
            linewidth = float(2 * popt[2])
    except (RuntimeError, ValueError):
        pass
    return PsdEstimate(freqs, psd, linewidth, float(freqs[k]), total, r2)


# ---------------------------------------------------------------- threshold


@dataclass
class ThresholdResult:
    depth: float
    split_index: int  # index of the first above-knee point
    slope_below: float
    slope_above: float
    g2_crossing: float | None  # depth where g2 falls through 1.5
    g2_crossing_index: int | None
    g2_consistent: bool


def _line(x, y):
    slope, icpt = np.polyfit(x, y, 1)
    return slope, icpt, float(np.sum((y - (slope * x + icpt)) ** 2))


def detect_threshold(sweep) -> ThresholdResult:
    """Knee of mean n versus pump depth from a two-segment linear fit.

    ``sweep`` is a sequence of ``(depth, mean_n, g2_zero)``. The split
    minimizing the total residual defines the segments; the knee is their
    intersection. A knee requires the upper slope to exceed the lower one by
    10x. The g2 = 1.5 crossing is reported as a cross-check.
    """
    arr = np.asarray(sweep, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 8 or arr.shape[1] < 3:
        raise ValueError("threshold detection needs >= 8 sweep points of (depth, mean_n, g2)")
    arr = arr[np.argsort(arr[:, 0])]
    d, m, g2 = arr[:, 0], arr[:, 1], arr[:, 2]

    best = None
    for s in range(2, len(d) - 1):
        a = _line(d[:s], m[:s])
        b = _line(d[s:], m[s:])
        sse = a[2] + b[2]
        if best is None or sse < best[0]:
            best = (sse, s, a, b)
    _, s, (sa, ia, _), (sb, ib, _) = best
    diag = f"split at index {s}: slopes {sa:.4g} (below), {sb:.4g} (above)"
    if not (sb > 0 and sb > KNEE_SLOPE_RATIO * max(sa, 0.0) and sb != sa):
        raise CalibrationError(f"no knee found (single-regime sweep?); {diag}")
    knee = (ia - ib) / (sb - sa)
    if not d[0] <= knee <= d[-1]:
        raise CalibrationError(f"no knee inside the sweep range; {diag}, intersection at {knee:.4g}")

    cross, cross_idx = None, None
    below = np.nonzero(g2 <= G2_CROSSING)[0]
    if below.size and below[0] > 0:
        j = int(below[0])
        frac = (g2[j - 1] - G2_CROSSING) / (g2[j - 1] - g2[j])
        cross = float(d[j - 1] + frac * (d[j] - d[j - 1]))
        cross_idx = j
    consistent = cross_idx is not None and abs(cross_idx - s) <= 2
    return ThresholdResult(float(knee), int(s), float(sa), float(sb), cross, cross_idx, consistent)


# ---------------------------------------------------------------- transients


@dataclass(frozen=True)
class RateFit:
    slope: float  # d ln n / dt, 1/s
    r2: float
    t0: float
    t1: float


def fit_log_rate(times, n, lo: float, hi: float, min_points: int = 20) -> RateFit:
    """Least-squares slope of ln n(t) over samples with lo < n < hi."""
    times = np.asarray(times, dtype=float)
    n = np.asarray(n, dtype=float)
    mask = (n > lo) & (n < hi)
    if mask.sum() < min_points:
        raise CalibrationError("no exponential window found (too few samples in range); use a longer run")
    t = times[mask]
    y = np.log(n[mask])
    slope, icpt = np.polyfit(t, y, 1)
    resid = y - (slope * t + icpt)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 0.0
    return RateFit(float(slope), r2, float(t[0]), float(t[-1]))


def rising_edge_fit(times, n, lo: float, hi: float, min_points: int = 10) -> RateFit:
    """Exponential fit over the first contiguous climb from ``lo`` to ``hi``."""
    n = np.asarray(n, dtype=float)
    above = np.nonzero(n >= hi)[0]
    if not above.size:
        raise CalibrationError(f"n never reaches {hi:.4g}; no growth window")
    i_hi = int(above[0])
    below = np.nonzero(n[:i_hi] <= lo)[0]
    if not below.size:
        raise CalibrationError(f"n starts above {lo:.4g}; no growth window")
    i_lo = int(below[-1])
    sl = slice(i_lo, i_hi + 1)
    return fit_log_rate(np.asarray(times)[sl], n[sl], 0.0, np.inf, min_points)


def first_crossing(times, n, level: float) -> float | None:
    idx = np.nonzero(np.asarray(n) >= level)[0]
    return float(times[idx[0]]) if idx.size else None
