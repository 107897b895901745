"""Training objectives for both networks.

Signals arrive as ``[N, T]`` tensors (or ``[T]``); every loss returns one value
per window so the trainer can log components before reducing over the batch.
Targets (pseudo PPG, labels, ABP) are plain arrays and never receive gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import signal as sig
from .autodiff import tensor as ad
from .autodiff.tensor import Tensor

log = logging.getLogger(__name__)

SOFT_HR_TEMPERATURE = 10.0


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1e-4  # L_HR
    lambda2: float = 100.0  # L_freq
    delta: float = 1.0  # Huber knee (mmHg)

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.delta) <= 0:
            raise ValueError("loss weights must be positive")


def _as_2d(y) -> Tensor:
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
    return y.reshape((1,) + y.shape) if y.ndim == 1 else y


def _arr2d(y) -> np.ndarray:
    a = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    return a[None] if a.ndim == 1 else a


@lru_cache(maxsize=16)
def _dft_band(n: int, rate: float, pad_to: int, lo: float, hi: float, dtype: str):
    freqs = np.fft.rfftfreq(pad_to, d=1.0 / rate)
    mask = sig.band_mask(freqs, (lo, hi))
    f = freqs[mask]
    t = np.arange(n)
    ang = 2 * np.pi * np.outer(t, np.nonzero(mask)[0]) / pad_to
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype), f


def band_psd(y, rate: float = sig.DEFAULT_RATE, pad_to: int = sig.DEFAULT_PAD,
             band=sig.HR_BAND, normalize: bool = False) -> tuple[Tensor, np.ndarray]:
    """Differentiable in-band periodogram, same scaling as :func:`signal.power_spectrum`."""
    y = _as_2d(y)
    n = y.shape[-1]
    c, s, f = _dft_band(n, float(rate), pad_to, band[0], band[1], str(y.dtype))
    re = y @ Tensor(c)
    im = y @ Tensor(s)
    p = (re * re + im * im) * (2.0 / (rate * n))
    if normalize:
        p = p / p.max(axis=-1, keepdims=True)
    return p, f


def l_freq(y_hat, y, rate: float = sig.DEFAULT_RATE, pad_to: int = sig.DEFAULT_PAD,
           normalize: bool = False) -> Tensor:
    """L2 distance between in-band power spectra, per window."""
    p_hat, _ = band_psd(y_hat, rate, pad_to, normalize=normalize)
    with ad.no_grad():
        p_ref, _ = band_psd(Tensor(_arr2d(y).astype(p_hat.dtype)), rate, pad_to,
                            normalize=normalize)
    return ad.l2norm(p_hat - p_ref.data, axis=-1)


def soft_hr(y_hat, rate: float = sig.DEFAULT_RATE, pad_to: int = sig.DEFAULT_PAD,
            temperature: float = SOFT_HR_TEMPERATURE) -> Tensor:
    """Differentiable heart rate: softmax-weighted mean in-band frequency (BPM)."""
    p, f = band_psd(y_hat, rate, pad_to)
    w = ad.softmax((p / p.max(axis=-1, keepdims=True)) * temperature, axis=-1)
    return (w * Tensor(60.0 * f.astype(p.dtype))).sum(axis=-1)


def l_hr(hr_hat, hr) -> Tensor:
    hr_hat = hr_hat if isinstance(hr_hat, Tensor) else Tensor(np.asarray(hr_hat, dtype=np.float64))
    return ad.tabs(hr_hat - np.asarray(hr, dtype=hr_hat.dtype))


def l_time(y_hat_a, y) -> Tensor:
    y_hat_a = _as_2d(y_hat_a)
    ref = _arr2d(y)
    if ref.shape != y_hat_a.shape:
        raise ValueError(f"l_time: length mismatch {y_hat_a.shape} vs {ref.shape}")
    return ad.l2norm(y_hat_a - ref.astype(y_hat_a.dtype), axis=-1)


def pv_index_sets(x: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Peak/valley index sets for L_pv with the raw-set fallback; None means skip."""
    ex = sig.extrema_sets(x)
    peaks = ex.refined_peak_times if ex.refined_peak_times.size else ex.peak_times
    valleys = ex.refined_valley_times if ex.refined_valley_times.size else ex.valley_times
    if peaks.size == 0 or valleys.size == 0:
        return None
    return peaks, valleys


def l_pv(y_hat, y) -> Tensor:
    """Distance between (mean peak, mean valley) levels; extrema locations are constants."""
    y_hat = _as_2d(y_hat)
    ref = _arr2d(y)
    rows = []
    for i in range(y_hat.shape[0]):
        sets_hat = pv_index_sets(y_hat.data[i])
        sets_ref = pv_index_sets(ref[i])
        if sets_hat is None or sets_ref is None:
            log.info("L_pv skipped for window %d: no peaks/valleys", i)
            rows.append(Tensor(np.zeros(1, dtype=y_hat.dtype)))
            continue
        (ph, vh), (pr, vr) = sets_hat, sets_ref
        row = y_hat[i]
        p_hat = row[ph].mean()
        v_hat = row[vh].mean()
        d = ad.stack([p_hat - float(ref[i][pr].mean()), v_hat - float(ref[i][vr].mean())])
        rows.append(ad.l2norm(d).reshape((1,)))
    return ad.concat(rows, axis=0)


def l_facial(y_hat_f, y, hr, weights: LossWeights = LossWeights(), rate: float = sig.DEFAULT_RATE,
             parts: dict | None = None) -> Tensor:
    hr_term = l_hr(soft_hr(y_hat_f, rate), hr)
    freq_term = l_freq(y_hat_f, y, rate)
    pv_term = l_pv(y_hat_f, y)
    if parts is not None:
        parts.update(l_hr=hr_term, l_freq=freq_term, l_pv=pv_term)
    return hr_term * weights.lambda1 + freq_term * weights.lambda2 + pv_term


def l_acral(y_hat_a, y, hr, weights: LossWeights = LossWeights(), rate: float = sig.DEFAULT_RATE,
            parts: dict | None = None) -> Tensor:
    time_term = l_time(y_hat_a, y)
    if parts is not None:
        parts["l_time"] = time_term
    return l_facial(y_hat_a, y, hr, weights, rate, parts) + time_term


def huber_bp(bp_hat, bp, delta: float = 1.0) -> Tensor:
    bp_hat = bp_hat if isinstance(bp_hat, Tensor) else Tensor(np.asarray(bp_hat, dtype=np.float64))
    d = bp_hat - np.asarray(bp, dtype=bp_hat.dtype)
    a = np.abs(d.data)
    quad = (d * d) * 0.5
    lin = ad.tabs(d) * delta - 0.5 * delta * delta
    small = a < delta
    return ad.where_const(small, quad, 0.0) + ad.where_const(~small, lin, 0.0)


def scale_to_abp(y_hat_a, sbp_hat: Tensor, dbp_hat: Tensor) -> Tensor:
    """Differentiable min/max rescaling of the acral signal into [DBP, SBP]."""
    y = _as_2d(y_hat_a)
    lo = -((-y).max(axis=-1, keepdims=True))
    hi = y.max(axis=-1, keepdims=True)
    sbp = sbp_hat.reshape((-1, 1))
    dbp = dbp_hat.reshape((-1, 1))
    return (y - lo) / (hi - lo) * (sbp - dbp) + dbp


def l_abp(y_hat_a, sbp_hat, dbp_hat, abp) -> Tensor:
    sbp_hat = sbp_hat if isinstance(sbp_hat, Tensor) else Tensor(np.atleast_1d(np.asarray(sbp_hat, dtype=np.float64)))
    dbp_hat = dbp_hat if isinstance(dbp_hat, Tensor) else Tensor(np.atleast_1d(np.asarray(dbp_hat, dtype=np.float64)))
    y_s = scale_to_abp(y_hat_a, sbp_hat, dbp_hat)
    ref = _arr2d(abp).astype(y_s.dtype)
    return ad.l2norm(y_s - ref, axis=-1)
