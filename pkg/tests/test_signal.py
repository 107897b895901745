import numpy as np
import pytest
import scipy.signal
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phasebp import signal as sig
from phasebp.signal import EmptyExtrema, NoDominantFrequency, PhysioSignal, SignalError

RATE = 25.0
t = np.arange(150) / RATE


def sine(f, amp=1.0, n=150, phase=0.0):
    return PhysioSignal(amp * np.sin(2 * np.pi * f * np.arange(n) / RATE + phase), RATE)


def band_power(x, f, rate=RATE):
    freqs, p = scipy.signal.periodogram(x, fs=rate, nfft=4096, window="hann")
    return p[np.argmin(np.abs(freqs - f))]


# -- PhysioSignal ---------------------------------------------------------------------
def test_signal_validation():
    with pytest.raises(SignalError):
        PhysioSignal([1.0], RATE)
    with pytest.raises(SignalError):
        PhysioSignal([1.0, np.nan], RATE)
    with pytest.raises(SignalError):
        PhysioSignal([1.0, 2.0], 0.0)
    s = PhysioSignal([1, 2, 3], 25)
    assert s.samples.dtype == np.float64 and len(s) == 3 and s.duration == pytest.approx(0.12)


# -- standardize ----------------------------------------------------------------------------
def test_standardize_cases():
    np.testing.assert_array_equal(sig.standardize(PhysioSignal([0.0, 2.0])).samples, [-1.0, 1.0])
    x = np.random.default_rng(0).standard_normal(300) * 7 + 3
    z = sig.standardize(PhysioSignal(x)).samples
    assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-9
    np.testing.assert_allclose(sig.standardize(PhysioSignal(z)).samples, z, atol=1e-6)
    with pytest.raises(SignalError):
        sig.standardize(PhysioSignal(np.full(10, 4.0)))


# -- detrend -------------------------------------------------------------------------------
def dense_detrend(z, lam):
    n = z.size
    d2 = np.zeros((n - 2, n))
    for i in range(n - 2):
        d2[i, i:i + 3] = [1, -2, 1]
    return z - np.linalg.solve(np.eye(n) + lam ** 2 * d2.T @ d2, z)


def test_detrend_lambda_zero_annihilates():
    x = np.random.default_rng(1).standard_normal(50)
    np.testing.assert_allclose(sig.detrend(PhysioSignal(x), 0.0).samples, 0.0, atol=1e-12)


def test_detrend_matches_dense_solve():
    x = np.random.default_rng(2).standard_normal(150)
    np.testing.assert_allclose(sig.detrend(PhysioSignal(x), 100.0).samples, dense_detrend(x, 100.0),
                               atol=1e-8)


def test_detrend_removes_ramp():
    ramp = np.linspace(0, 50, 150)
    out = sig.detrend(PhysioSignal(ramp), 100.0).samples
    assert np.max(np.abs(out[25:-25])) < 0.01 * 50


def test_detrend_attenuates_drift_keeps_pulse():
    x = np.sin(2 * np.pi * 1.5 * t) + np.sin(2 * np.pi * 0.05 * t)
    y = sig.detrend(PhysioSignal(x), 100.0).samples
    drift_in = band_power(np.sin(2 * np.pi * 0.05 * t), 0.05)
    drift_out = band_power(y - sig.detrend(PhysioSignal(np.sin(2 * np.pi * 1.5 * t)), 100).samples,
                           0.05)
    assert 10 * np.log10(drift_in / drift_out) >= 20
    pulse_ratio = band_power(y, 1.5) / band_power(x, 1.5)
    assert abs(10 * np.log10(pulse_ratio)) <= 1


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 2 ** 31))
def test_detrend_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(60), rng.standard_normal(60)
    lhs = sig.detrend(PhysioSignal(a * x + b * y), 100).samples
    rhs = a * sig.detrend(PhysioSignal(x), 100).samples + b * sig.detrend(PhysioSignal(y), 100).samples
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_detrend_rejects_short():
    with pytest.raises(SignalError):
        sig.detrend(PhysioSignal([1.0, 2.0]))


# -- bandpass ------------------------------------------------------------------------------
def test_bandpass_passband_amplitude():
    x = sine(1.0)
    y = sig.bandpass(x).samples
    ratio = np.abs(y[25:-25]).max() / np.abs(x.samples[25:-25]).max()
    assert abs(ratio - 1) < 0.10


def test_bandpass_rejects_low_frequency_and_dc():
    x = sine(0.1)
    y = sig.bandpass(x).samples
    assert np.sqrt(np.mean(y ** 2)) < 0.1 * np.sqrt(np.mean(x.samples ** 2))
    dc = sig.bandpass(PhysioSignal(np.full(150, 3.0))).samples
    assert np.sqrt(np.mean(dc ** 2)) < 1e-3 * 3.0


def test_bandpass_filter_response():
    sos = sig.bandpass_sos(RATE)
    assert sos.shape == (2, 6)  # fourth order
    band = np.linspace(0.5, 3.0, 2001)
    _, h = scipy.signal.sosfreqz(sos, worN=band, fs=RATE)
    gain_db = 20 * np.log10(np.abs(h) ** 2)  # forward-backward squares the magnitude
    assert np.all(np.abs(gain_db) <= 1.0)
    _, hs = scipy.signal.sosfreqz(sos, worN=[0.25, 6.0], fs=RATE)
    assert np.all(20 * np.log10(np.abs(hs) ** 2) <= -20)


@pytest.mark.parametrize("f", [0.7, 1.2, 2.5])
def test_bandpass_zero_phase(f):
    x = sine(f, n=300)
    assert sig.xcorr_lag(x.samples, sig.bandpass(x).samples, 20) == 0


def test_bandpass_rate_too_low():
    with pytest.raises(SignalError):
        sig.bandpass(PhysioSignal(np.random.default_rng(0).random(40), 5.0))


# -- pseudo PPG ------------------------------------------------------------------------------
def test_pseudo_ppg_from_abp():
    abp = PhysioSignal(100 + 20 * np.sin(2 * np.pi * 1.2 * t) + 5 * np.sin(2 * np.pi * 2.4 * t))
    ppg = sig.pseudo_ppg_from_abp(abp)
    assert abs(sig.heart_rate(ppg) / 60 - 1.2) <= RATE / 2048
    assert abs(ppg.samples.mean()) < 0.05
    with pytest.raises(SignalError):
        sig.pseudo_ppg_from_abp(PhysioSignal(np.full(150, 90.0)))


def test_pseudo_ppg_mean_on_random_abp():
    rng = np.random.default_rng(5)
    for _ in range(10):
        f = rng.uniform(0.8, 2.5)
        abp = 95 + 15 * np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) + rng.normal(0, 1, 150)
        assert abs(sig.pseudo_ppg_from_abp(PhysioSignal(abp)).samples.mean()) < 0.05


# -- spectra and heart rate -------------------------------------------------------------------
def test_power_spectrum_peak_and_resolution():
    ps = sig.power_spectrum(sine(1.2))
    assert ps.resolution == pytest.approx(RATE / 2048)
    assert abs(ps.frequencies[np.argmax(ps.power)] - 1.2) <= RATE / 2048
    assert np.all(ps.power >= 0)
    assert np.allclose(np.diff(ps.frequencies), ps.resolution)


def test_power_spectrum_zero_and_parseval():
    assert np.all(sig.power_spectrum(PhysioSignal(np.zeros(150))).power == 0)
    rng = np.random.default_rng(3)
    ratios = []
    for n in (150, 150, 150):
        x = rng.standard_normal(n)
        ps = sig.power_spectrum(PhysioSignal(x))
        ratios.append(np.sum(ps.power) * ps.resolution / np.sum(x ** 2))
    assert np.ptp(ratios) / np.mean(ratios) < 1e-6


def test_power_spectrum_rejects_long_input():
    with pytest.raises(SignalError):
        sig.power_spectrum(PhysioSignal(np.ones(100)), pad_to=64)


def test_hr_examples():
    assert abs(sig.heart_rate(sine(1.2)) - 72) <= 0.8
    assert abs(sig.heart_rate(sine(0.5)) - 30) <= 0.8
    with pytest.raises(NoDominantFrequency):
        sig.heart_rate(PhysioSignal(np.zeros(150)))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.55, 2.95), st.floats(1e-3, 1e3), st.floats(0, 6.28))
def test_hr_invariant_under_positive_scaling(f, scale, phase):
    s = sine(f, phase=phase)
    assert sig.heart_rate(s) == sig.heart_rate(s.with_samples(s.samples * scale))


def test_trace_rate_ignores_offset():
    x = 0.6 + 0.01 * np.sin(2 * np.pi * 1.3 * t)
    assert abs(sig.trace_rate(x) - 78) <= 0.8


# -- derivatives ----------------------------------------------------------------------------------
def test_derivative_cases():
    ramp = PhysioSignal(3.0 * np.arange(20))
    np.testing.assert_allclose(sig.derivative(ramp, 1).samples, 3.0 * RATE)
    np.testing.assert_array_equal(sig.derivative(PhysioSignal(np.ones(9)), 2).samples, 0.0)
    s = sine(1.5)
    d2 = sig.derivative(s, 2).samples
    w2 = (2 * np.pi * 1.5) ** 2
    mid = slice(10, -10)
    rel = np.linalg.norm(d2[mid] + w2 * s.samples[mid]) / np.linalg.norm(w2 * s.samples[mid])
    assert rel < 0.05
    assert len(sig.derivative(s, 1)) == len(s)
    with pytest.raises(SignalError):
        sig.derivative(PhysioSignal([1.0, 2.0]), 2)
    with pytest.raises(SignalError):
        sig.derivative(s, 3)


# -- extrema ---------------------------------------------------------------------------------------
def brute_extrema(x):
    peaks, valleys = [], []
    for i in range(1, len(x) - 1):
        a, b = x[i] - x[i - 1], x[i + 1] - x[i]
        if a * b < 0 and x[i] > x[i - 1]:
            peaks.append(i)
        if a * b < 0 and x[i] < x[i - 1]:
            valleys.append(i)
    pm = np.mean([x[i] for i in peaks]) if peaks else 0.0
    vm = np.mean([x[i] for i in valleys]) if valleys else 0.0
    rp = [i for i in peaks if x[i] > pm or np.isclose(x[i], pm, rtol=1e-9, atol=1e-12)]
    rv = [i for i in valleys if x[i] < vm or np.isclose(x[i], vm, rtol=1e-9, atol=1e-12)]
    return peaks, valleys, rp, rv


def test_extrema_hand_cases():
    ex = sig.extrema_sets([0.0, 1, 0, 1, 0])
    assert list(ex.peak_times) == [1, 3] and list(ex.valley_times) == [2]
    ramp = sig.extrema_sets(np.arange(10.0))
    assert all(a.size == 0 for a in (ramp.peak_times, ramp.valley_times,
                                     ramp.refined_peak_times, ramp.refined_valley_times))
    ex = sig.extrema_sets([0.0, 1.0, 0.0, 1.0, 0.0, 3.0, 0.0])
    assert list(ex.refined_peak_times) == [5]


def test_extrema_match_brute_force_on_1000_signals():
    rng = np.random.default_rng(11)
    for k in range(1000):
        n = int(rng.integers(3, 60))
        x = rng.integers(-3, 4, n).astype(float) if k % 3 == 0 else rng.standard_normal(n)
        ex = sig.extrema_sets(x)
        p, v, rp, rv = brute_extrema(x)
        assert list(ex.peak_times) == p and list(ex.valley_times) == v
        assert list(ex.refined_peak_times) == rp and list(ex.refined_valley_times) == rv
        assert set(rp) <= set(p) and set(rv) <= set(v)
        assert all(1 <= i <= n - 2 for i in p + v)


def test_pv_levels():
    p, v = sig.pv_levels(np.sin(2 * np.pi * 1.2 * t) * 2.0)
    assert abs(p - 2.0) < 0.04 and abs(v + 2.0) < 0.04
    assert sig.pv_levels([0.0, 1, 0, 1, 0]) == (1.0, 0.0)
    x = np.sin(2 * np.pi * 1.1 * t)
    p1, v1 = sig.pv_levels(x)
    p2, v2 = sig.pv_levels(x + 2.5)
    assert p2 - p1 == pytest.approx(2.5, abs=1e-12) and v2 - v1 == pytest.approx(2.5, abs=1e-12)
    with pytest.raises(EmptyExtrema):
        sig.pv_levels(np.arange(5.0))


# -- ABP scaling and ground truth ---------------------------------------------------------------
def test_scale_rppg_to_abp():
    y = PhysioSignal(np.linspace(0, 1, 30))
    out = sig.scale_rppg_to_abp(y, 120, 80).samples
    assert out.min() == pytest.approx(80) and out.max() == pytest.approx(120)
    r = np.random.default_rng(4).standard_normal(150)
    out = sig.scale_rppg_to_abp(PhysioSignal(r), 131.5, 72.25).samples
    assert abs(out.min() - 72.25) < 1e-6 and abs(out.max() - 131.5) < 1e-6
    assert abs(sig.pearson(r, out) - 1) < 1e-9
    with pytest.raises(SignalError):
        sig.scale_rppg_to_abp(PhysioSignal(np.ones(5)), 120, 80)
    with pytest.raises(SignalError):
        sig.scale_rppg_to_abp(y, 80, 80)


def test_gt_bp_from_abp():
    abp = PhysioSignal(100 + 20 * np.sin(2 * np.pi * 1.3 * t))
    sbp, dbp = sig.gt_bp_from_abp(abp)
    assert abs(sbp - 120) < 1 and abs(dbp - 80) < 1 and sbp > dbp
    with pytest.raises(EmptyExtrema):
        sig.gt_bp_from_abp(PhysioSignal(np.full(150, 90.0)))


@settings(max_examples=30, deadline=None)
@given(st.floats(90, 170), st.floats(40, 85), st.floats(0.7, 2.8))
def test_scale_then_gt_roundtrip(sbp, dbp, f):
    clean = PhysioSignal(np.sin(2 * np.pi * f * np.arange(300) / RATE))
    s, d = sig.gt_bp_from_abp(sig.scale_rppg_to_abp(clean, sbp, dbp))
    assert abs(s - sbp) < 1 and abs(d - dbp) < 1


def test_xcorr_lag_sign():
    x = np.sin(2 * np.pi * 1.1 * np.arange(200) / RATE)
    assert sig.xcorr_lag(x[5:155], x[2:152], 8) == 3
    assert sig.xcorr_lag(x[2:152], x[5:155], 8) == -3


# -- serialization --------------------------------------------------------------------------------
@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-1e6, 1e6)))
def test_signal_serialization_roundtrip(tmp_path_factory, x):
    s = PhysioSignal(x, 25.0)
    assert np.array_equal(sig.signal_from_json(sig.signal_to_json(s)).samples, s.samples)
    path = tmp_path_factory.mktemp("sig") / "s.csv"
    sig.write_signal_csv(s, path)
    assert np.array_equal(sig.read_signal_csv(path, 25.0).samples, s.samples)


def test_spectrum_csv_roundtrip(tmp_path):
    ps = sig.power_spectrum(sine(1.4))
    sig.write_spectrum_csv(ps, tmp_path / "p.csv")
    back = sig.read_spectrum_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.power, ps.power)
    np.testing.assert_array_equal(back.frequencies, ps.frequencies)
