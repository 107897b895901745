"""1-D physiological signal processing.

Ground-truth chain for a 6 s ABP window: standardize, smoothness-priors
detrend, zero-phase 0.5-3 Hz band-pass, then heart rate from the zero-padded
periodogram and SBP/DBP from refined peak/valley levels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.signal

HR_BAND = (0.5, 3.0)
DEFAULT_RATE = 25.0
DEFAULT_PAD = 2048
DEFAULT_DETREND_LAMBDA = 100.0


class SignalError(ValueError):
    """Invalid or degenerate signal input."""


class NoDominantFrequency(SignalError):
    pass


class EmptyExtrema(SignalError):
    pass


@dataclass(frozen=True)
class PhysioSignal:
    samples: np.ndarray
    rate: float = DEFAULT_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.rate <= 0:
            raise SignalError(f"sample rate must be positive, got {self.rate}")
        if arr.size < 2:
            raise SignalError("a signal needs at least 2 samples")
        if not np.all(np.isfinite(arr)):
            raise SignalError("signal contains non-finite samples")
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "rate", float(self.rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.rate

    def with_samples(self, samples) -> "PhysioSignal":
        return PhysioSignal(samples, self.rate)


@dataclass(frozen=True)
class PowerSpectrum:
    frequencies: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        if self.frequencies.shape != self.power.shape:
            raise SignalError("frequencies and power differ in length")

    @property
    def resolution(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0])


@dataclass(frozen=True)
class ExtremaSets:
    peak_times: np.ndarray
    valley_times: np.ndarray
    refined_peak_times: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    refined_valley_times: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def _as_signal(s, rate=DEFAULT_RATE) -> PhysioSignal:
    return s if isinstance(s, PhysioSignal) else PhysioSignal(s, rate)


def standardize(s: PhysioSignal) -> PhysioSignal:
    x = s.samples
    sd = x.std()
    if sd <= 1e-12 * max(1.0, float(np.abs(x).max())):
        raise SignalError("cannot standardize a constant signal (zero variance)")
    return s.with_samples((x - x.mean()) / sd)


def _detrend_system(n: int, lam: float) -> np.ndarray:
    """Upper banded form of I + lam^2 D2^T D2 for solveh_banded."""
    d2 = np.zeros((n - 2, n))
    idx = np.arange(n - 2)
    d2[idx, idx] = 1.0
    d2[idx, idx + 1] = -2.0
    d2[idx, idx + 2] = 1.0
    a = np.eye(n) + lam ** 2 * d2.T @ d2
    ab = np.zeros((3, n))
    for k in range(3):
        ab[2 - k, k:] = np.diagonal(a, k)
    return ab


def detrend(s: PhysioSignal, lam: float = DEFAULT_DETREND_LAMBDA) -> PhysioSignal:
    """Smoothness-priors detrending: ``z - (I + lam^2 D2'D2)^-1 z``."""
    z = s.samples
    if z.size < 3:
        raise SignalError("detrend needs at least 3 samples")
    if lam == 0:
        return s.with_samples(np.zeros_like(z))
    trend = scipy.linalg.solveh_banded(_detrend_system(z.size, lam), z)
    return s.with_samples(z - trend)


BANDPASS_RIPPLE_DB = 0.45  # per pass; doubled by forward-backward filtering


def bandpass_sos(rate: float, lo: float = HR_BAND[0], hi: float = HR_BAND[1]) -> np.ndarray:
    # Chebyshev I of order 2 per band edge (4th-order overall): equiripple keeps the whole
    # 0.5-3 Hz band within 1 dB after two passes, where a Butterworth sags 6 dB at the edges.
    return scipy.signal.cheby1(2, BANDPASS_RIPPLE_DB, [lo, hi], btype="bandpass", fs=rate,
                               output="sos")


def bandpass(s: PhysioSignal, lo: float = HR_BAND[0], hi: float = HR_BAND[1]) -> PhysioSignal:
    """Zero-phase band-pass (forward-backward) with 1 s reflected edges."""
    if s.rate <= 2 * hi:
        raise SignalError(f"rate {s.rate} Hz too low for a {hi} Hz band edge")
    if not 0 < lo < hi:
        raise SignalError(f"invalid band [{lo}, {hi}]")
    padlen = min(int(round(s.rate)), s.samples.size - 1)
    y = scipy.signal.sosfiltfilt(bandpass_sos(s.rate, lo, hi), s.samples, padtype="even",
                                 padlen=padlen)
    return s.with_samples(y)


def pseudo_ppg_from_abp(abp: PhysioSignal, lam: float = DEFAULT_DETREND_LAMBDA) -> PhysioSignal:
    return bandpass(detrend(standardize(abp), lam))


def power_spectrum(s: PhysioSignal, pad_to: int = DEFAULT_PAD, normalize: bool = False) -> PowerSpectrum:
    """One-sided periodogram (power density) of the zero-padded signal.

    Integrating the density over frequency gives the mean square of ``s``.
    """
    x = s.samples
    n = x.size
    if n > pad_to:
        raise SignalError(f"signal length {n} exceeds pad_to={pad_to}")
    spec = np.fft.rfft(x, n=pad_to)
    power = np.abs(spec) ** 2 / (s.rate * n)
    power[1:] *= 2.0
    if pad_to % 2 == 0:
        power[-1] /= 2.0
    if normalize and power.max() > 0:
        power = power / power.max()
    freqs = np.fft.rfftfreq(pad_to, d=1.0 / s.rate)
    return PowerSpectrum(freqs, power)


def band_mask(freqs: np.ndarray, band=HR_BAND) -> np.ndarray:
    return (freqs >= band[0]) & (freqs <= band[1])


def hr_from_spectrum(ps: PowerSpectrum, band=HR_BAND) -> float:
    """Heart rate (BPM) at the in-band periodogram maximum."""
    lo, hi = band
    if lo < ps.frequencies[0] or hi > ps.frequencies[-1]:
        raise SignalError(f"band {band} outside spectrum range")
    mask = band_mask(ps.frequencies, band)
    p = ps.power[mask]
    if p.size == 0 or p.max() < 1e-12:
        raise NoDominantFrequency("no in-band spectral peak")
    return float(60.0 * ps.frequencies[mask][np.argmax(p)])


def heart_rate(s: PhysioSignal, pad_to: int = DEFAULT_PAD, band=HR_BAND) -> float:
    return hr_from_spectrum(power_spectrum(s, pad_to), band)


def trace_rate(x, rate: float = DEFAULT_RATE, pad_to: int = DEFAULT_PAD, band=HR_BAND) -> float:
    """Dominant in-band rate (BPM) of a raw trace after removing its mean."""
    x = np.asarray(x, dtype=np.float64)
    return heart_rate(PhysioSignal(x - x.mean(), rate), pad_to, band)


def derivative(s: PhysioSignal, order: int = 1) -> PhysioSignal:
    """Central differences inside, one-sided at the two edges; same length."""
    x = s.samples
    if order not in (1, 2):
        raise SignalError("order must be 1 or 2")
    if x.size < order + 1:
        raise SignalError(f"need at least {order + 1} samples for order {order}")
    if order == 1:
        return s.with_samples(np.gradient(x, 1.0 / s.rate, edge_order=1))
    d2 = np.empty_like(x)
    if x.size == 2:
        d2[:] = 0.0
    else:
        d2[1:-1] = x[2:] - 2 * x[1:-1] + x[:-2]
        d2[0], d2[-1] = d2[1], d2[-2]
    return s.with_samples(d2 * s.rate ** 2)


def _refine(values: np.ndarray, idx: np.ndarray, above: bool) -> np.ndarray:
    if idx.size == 0:
        return idx
    v = values[idx]
    m = v.mean()
    tie = np.isclose(v, m, rtol=1e-9, atol=1e-12)
    keep = (v > m) | tie if above else (v < m) | tie
    return idx[keep]


def extrema_sets(y) -> ExtremaSets:
    """Local peaks/valleys by the sign-change rule, plus mean-threshold refinement."""
    x = y.samples if isinstance(y, PhysioSignal) else np.asarray(y, dtype=np.float64)
    if x.size < 3:
        raise SignalError("extrema need at least 3 samples")
    d1 = x[1:-1] - x[:-2]
    d2 = x[2:] - x[1:-1]
    turn = d1 * d2 < 0
    peaks = np.nonzero(turn & (d1 > 0))[0] + 1
    valleys = np.nonzero(turn & (d1 < 0))[0] + 1
    return ExtremaSets(peaks, valleys, _refine(x, peaks, True), _refine(x, valleys, False))


def pv_levels(y) -> tuple[float, float]:
    """Mean refined-peak and refined-valley values."""
    x = y.samples if isinstance(y, PhysioSignal) else np.asarray(y, dtype=np.float64)
    ex = extrema_sets(x)
    if ex.refined_peak_times.size == 0 or ex.refined_valley_times.size == 0:
        raise EmptyExtrema("no refined peaks or valleys in window")
    return float(x[ex.refined_peak_times].mean()), float(x[ex.refined_valley_times].mean())


def scale_rppg_to_abp(y_a: PhysioSignal, sbp_hat: float, dbp_hat: float) -> PhysioSignal:
    """Affine map of the acral signal onto [dbp_hat, sbp_hat]."""
    x = y_a.samples
    lo, hi = x.min(), x.max()
    if hi - lo <= 1e-12:
        raise SignalError("cannot scale a flat signal")
    if sbp_hat <= dbp_hat:
        raise SignalError(f"SBP {sbp_hat} must exceed DBP {dbp_hat}")
    return y_a.with_samples((x - lo) / (hi - lo) * (sbp_hat - dbp_hat) + dbp_hat)


def gt_bp_from_abp(abp: PhysioSignal) -> tuple[float, float]:
    """(SBP, DBP) as the mean refined peak and valley of an ABP window."""
    return pv_levels(abp)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))


def xcorr_lag(a, b, max_lag: int | None = None) -> int:
    """Lag (samples) by which ``b`` trails ``a`` at the cross-correlation peak."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a - a.mean()
    b = b - b.mean()
    n = a.size
    max_lag = n - 1 if max_lag is None else max_lag
    lags = np.arange(-max_lag, max_lag + 1)
    vals = []
    for k in lags:
        if k >= 0:
            vals.append(np.dot(a[: n - k], b[k:]))
        else:
            vals.append(np.dot(a[-k:], b[: n + k]))
    return int(lags[int(np.argmax(vals))])


# -- serialization -----------------------------------------------------------
def write_signal_csv(s: PhysioSignal, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value"])
        for v in s.samples:
            w.writerow([repr(float(v))])


def read_signal_csv(path, rate: float) -> PhysioSignal:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["value"]:
        raise SignalError(f"{path}: expected a single 'value' column")
    return PhysioSignal(np.array([float(r[0]) for r in rows[1:]]), rate)


def signal_to_json(s: PhysioSignal) -> str:
    return json.dumps({"rate": s.rate, "samples": s.samples.tolist()})


def signal_from_json(text: str) -> PhysioSignal:
    obj = json.loads(text)
    return PhysioSignal(np.asarray(obj["samples"], dtype=np.float64), obj["rate"])


def write_spectrum_csv(ps: PowerSpectrum, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frequency", "power"])
        for f, p in zip(ps.frequencies, ps.power):
            w.writerow([repr(float(f)), repr(float(p))])


def read_spectrum_csv(path) -> PowerSpectrum:
    data = np.loadtxt(Path(path), delimiter=",", skiprows=1, ndmin=2)
    return PowerSpectrum(data[:, 0], data[:, 1])
