"""Synthetic facial-pulse clips with synchronized ABP and known ground truth.

Skin pixels inside an elliptical mask carry a periodic pulse template.  The
green and blue channels pulse in the facial phase; the red channel carries the
pulse delayed by the pulse transit time, i.e. in the phase of the acral ABP
reference.  That delayed component is what gives the acral head (and later the
BP regressor) something observable to learn from.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

from . import signal as sig
from .signal import PhysioSignal

log = logging.getLogger(__name__)

T_FRAMES = 150
RATE = 25.0
PROFILES = {"full": 128, "small": 16}

SKIN_RGB = (0.78, 0.58, 0.47)
BACKGROUND_RGB = (0.22, 0.26, 0.30)
CHANNEL_GAIN = (0.4, 1.0, 0.5)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class PulseShape:
    """Two Gaussian bumps per beat: systolic peak and the reflected wave."""

    systolic_phase: float = 0.25
    systolic_width: float = 0.12
    reflect_phase: float = 0.55
    reflect_width: float = 0.10
    reflect_gain: float = 0.45
    flatness: float = 4.0  # exponent of the systolic bump; >2 flattens its top


@dataclass(frozen=True)
class SynthSpec:
    hr: float = 72.0
    sbp: float = 120.0
    dbp: float = 80.0
    ptt_delay: float = 0.16
    noise_sigma: float = 0.0
    illum_drift: tuple[float, float] = (0.0, 0.1)  # amplitude, Hz
    seed: int = 0
    T: int = T_FRAMES
    H: int = 16
    W: int = 16
    rate: float = RATE
    jitter: float = 0.0
    pulse_amplitude: float = 0.06
    acral_cue: float = 1.0
    face_delay_spread: float = 0.0
    skin_rgb: tuple[float, float, float] = SKIN_RGB
    mask_center: tuple[float, float] = (0.5, 0.5)
    mask_axes: tuple[float, float] = (0.38, 0.30)
    shape: PulseShape = field(default_factory=PulseShape)

    def __post_init__(self):
        if not 30 <= self.hr <= 180:
            raise SynthError(f"hr {self.hr} outside [30, 180] BPM")
        if self.sbp <= self.dbp:
            raise SynthError(f"sbp {self.sbp} must exceed dbp {self.dbp}")
        if not 0 <= self.ptt_delay < 60.0 / self.hr:
            raise SynthError(f"ptt_delay {self.ptt_delay} must lie in [0, one beat period)")
        if not 0 <= self.jitter <= 0.02:
            raise SynthError("jitter must be within [0, 0.02]")

    def replace(self, **kw) -> "SynthSpec":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        obj = dict(obj)
        obj["shape"] = PulseShape(**obj.get("shape", {}))
        for key in ("illum_drift", "skin_rgb", "mask_center", "mask_axes"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def _raw_template(phase, shape: PulseShape):
    phase = np.mod(phase, 1.0)
    out = np.zeros_like(np.asarray(phase, dtype=np.float64))
    for k in (-1.0, 0.0, 1.0):
        out = out + np.exp(-0.5 * np.abs((phase - shape.systolic_phase + k) / shape.systolic_width)
                           ** shape.flatness)
        out = out + shape.reflect_gain * np.exp(
            -0.5 * ((phase - shape.reflect_phase + k) / shape.reflect_width) ** 2)
    return out


@lru_cache(maxsize=32)
def _template_range(shape: PulseShape) -> tuple[float, float]:
    grid = np.linspace(0.0, 1.0, 4097)
    vals = _raw_template(grid, shape)
    ends = []
    for sign in (1.0, -1.0):
        i = int(np.argmax(sign * vals))
        res = minimize_scalar(lambda p: -sign * float(_raw_template(np.array(p), shape)),
                              bounds=(grid[i] - 1 / 4096, grid[i] + 1 / 4096), method="bounded",
                              options={"xatol": 1e-12})
        ends.append(float(_raw_template(np.array(res.x), shape)))
    return ends[1], ends[0]


def pulse_waveform(hr: float, t, shape: PulseShape = PulseShape()):
    """Periodic pulse template with period 60/hr seconds, normalized to [0, 1]."""
    lo, hi = _template_range(shape)
    return (_raw_template(np.asarray(t, dtype=np.float64) * hr / 60.0, shape) - lo) / (hi - lo)


def _template_at_phase(spec: SynthSpec, beats):
    lo, hi = _template_range(spec.shape)
    return (_raw_template(beats, spec.shape) - lo) / (hi - lo)


def _rngs(spec: SynthSpec):
    ss = np.random.SeedSequence(spec.seed)
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def _phase_fn(spec: SynthSpec):
    """Cumulative beat count as a function of time (shared by the clip and the ABP).

    With jitter each beat boundary moves by at most ``jitter / 2`` of a period,
    so consecutive beat lengths vary by at most ``jitter`` while the mean rate
    stays at ``hr``.
    """
    f0 = spec.hr / 60.0
    if spec.jitter == 0:
        return lambda t: f0 * np.asarray(t, dtype=np.float64)
    rng_phase, _ = _rngs(spec)
    horizon = 4 * spec.T / spec.rate + 4.0  # long enough for slowed-down augmentation sources
    k = np.arange(-int(np.ceil(2.0 * f0)) - 1, int(np.ceil(horizon * f0)) + 2)
    shift = rng_phase.uniform(-0.5, 0.5, size=k.size) * spec.jitter
    shift[[0, -1]] = 0.0
    knots = (k + shift) / f0

    def phase(t):
        t = np.asarray(t, dtype=np.float64)
        inside = (t >= knots[0]) & (t <= knots[-1])
        return np.where(inside, np.interp(t, knots, k.astype(np.float64)), f0 * t)
    return phase


def gen_abp(spec: SynthSpec, n: int | None = None) -> PhysioSignal:
    """ABP (mmHg) at the acral site: the pulse delayed by ``ptt_delay``."""
    n = spec.T if n is None else n
    t = np.arange(n) / spec.rate
    w = _template_at_phase(spec, _phase_fn(spec)(t - spec.ptt_delay))
    return PhysioSignal(spec.dbp + (spec.sbp - spec.dbp) * w, spec.rate)


def skin_mask(spec: SynthSpec) -> np.ndarray:
    yy, xx = np.mgrid[0:spec.H, 0:spec.W]
    cy, cx = spec.mask_center[0] * spec.H, spec.mask_center[1] * spec.W
    ay, ax = spec.mask_axes[0] * spec.H, spec.mask_axes[1] * spec.W
    if ay <= 0 or ax <= 0:
        return np.zeros((spec.H, spec.W), dtype=bool)
    return ((yy + 0.5 - cy) / ay) ** 2 + ((xx + 0.5 - cx) / ax) ** 2 <= 1.0


def gen_clip(spec: SynthSpec, n: int | None = None) -> np.ndarray:
    """Clip ``[3, n, H, W]`` in [0, 1]; the facial pulse leads ABP by ``ptt_delay``."""
    n = spec.T if n is None else n
    _, rng = _rngs(spec)
    t = np.arange(n) / spec.rate
    mask = skin_mask(spec)
    phase = _phase_fn(spec)

    # vertical delay gradient across the skin region (0 at the top edge of the mask)
    rows = np.nonzero(mask.any(axis=1))[0]
    grad = np.zeros((spec.H, 1))
    if rows.size > 1 and spec.face_delay_spread > 0:
        grad[rows, 0] = (rows - rows[0]) / (rows[-1] - rows[0])
    delays = spec.ptt_delay * spec.face_delay_spread * np.broadcast_to(grad, (spec.H, spec.W))

    if spec.face_delay_spread > 0:
        facial = _template_at_phase(spec, phase(t[:, None, None] - delays[None]))
    else:
        facial = np.broadcast_to(_template_at_phase(spec, phase(t))[:, None, None], (n, spec.H, spec.W))
    acral = _template_at_phase(spec, phase(t - spec.ptt_delay))[:, None, None]

    amp, drift_hz = spec.illum_drift
    drift = amp * np.sin(2 * np.pi * drift_hz * t + rng.uniform(0, 2 * np.pi))[:, None, None]
    clip = np.empty((3, n, spec.H, spec.W), dtype=np.float64)
    for c in range(3):
        q = spec.acral_cue if c == 0 else 0.0
        pulse = spec.pulse_amplitude * CHANNEL_GAIN[c] * ((1 - q) * facial + q * acral)
        skin = spec.skin_rgb[c] + pulse
        clip[c] = np.where(mask[None], skin, BACKGROUND_RGB[c]) + drift
    if spec.noise_sigma > 0:
        clip += rng.normal(0.0, spec.noise_sigma, size=clip.shape)
    return np.clip(clip, 0.0, 1.0).astype(np.float32)


def skin_trace(clip: np.ndarray, mask: np.ndarray, channel: int = 1) -> np.ndarray:
    """Mean skin-pixel intensity per frame for one colour channel."""
    if not mask.any():
        return np.zeros(clip.shape[1])
    return clip[channel][:, mask].mean(axis=1)


@dataclass
class WindowSample:
    clip: np.ndarray  # [3, T, H, W]
    abp: PhysioSignal
    pseudo_ppg: PhysioSignal
    hr_gt: float
    sbp_gt: float
    dbp_gt: float
    window_id: str = ""
    subject: int = 0
    split: str = "train"
    spec: SynthSpec | None = None


def make_window(spec: SynthSpec, window_id: str = "", subject: int = 0, split: str = "train",
                check: bool = True) -> WindowSample:
    clip = gen_clip(spec)
    abp = gen_abp(spec)
    ppg = sig.pseudo_ppg_from_abp(abp)
    hr = sig.heart_rate(ppg)
    sbp, dbp = sig.gt_bp_from_abp(abp)
    if check:
        bin_bpm = 60.0 * spec.rate / sig.DEFAULT_PAD
        if abs(hr - spec.hr) > bin_bpm:
            raise SynthError(f"{window_id}: recovered HR {hr:.2f} vs generator {spec.hr:.2f}")
        if abs(sbp - spec.sbp) > 1.0 or abs(dbp - spec.dbp) > 1.0:
            raise SynthError(f"{window_id}: recovered BP ({sbp:.1f}, {dbp:.1f}) vs "
                             f"({spec.sbp:.1f}, {spec.dbp:.1f})")
    return WindowSample(clip, abp, ppg, hr, sbp, dbp, window_id, subject, split, spec)


@dataclass(frozen=True)
class SpecDistribution:
    """Uniform label ranges for generated windows."""

    hr: tuple[float, float] = (62.0, 120.0)
    sbp: tuple[float, float] = (100.0, 140.0)
    pulse_pressure: tuple[float, float] = (30.0, 50.0)
    ptt_base: float = 0.16  # delay (s) at SBP 100 mmHg
    ptt_coupling: float = 0.0  # s per mmHg: delay = base - k * (sbp - 100)
    noise_sigma: float = 0.0
    illum_drift: tuple[float, float] = (0.0, 0.1)
    jitter: float = 0.0
    acral_cue: float = 1.0  # share of the red channel pulsing at acral phase
    face_delay_spread: float = 0.0
    size: int = 16
    n_subjects: int = 20
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if not (30 <= self.hr[0] <= self.hr[1] <= 180):
            raise SynthError(f"hr range {self.hr} must lie within [30, 180] BPM")
        if self.sbp[0] > self.sbp[1] or self.pulse_pressure[0] <= 0:
            raise SynthError("invalid blood pressure ranges")
        if self.sbp[0] - self.pulse_pressure[1] <= 0:
            raise SynthError("DBP would be non-positive")
        if self.n_subjects < 1:
            raise SynthError("need at least one subject")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SpecDistribution":
        obj = {k: tuple(v) if isinstance(v, list) else v for k, v in obj.items()}
        unknown = set(obj) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise SynthError(f"unknown distribution keys: {sorted(unknown)}")
        return cls(**obj)

    def delay_for(self, sbp: float) -> float:
        return self.ptt_base - self.ptt_coupling * (sbp - 100.0)


def subject_splits(n_subjects: int, fractions, seed: int) -> dict[int, str]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    order = rng.permutation(n_subjects)
    n_train = max(1, int(round(fractions[0] * n_subjects)))
    n_val = int(round(fractions[1] * n_subjects))
    out = {}
    for rank, s in enumerate(order):
        out[int(s)] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return out


def _subject_look(subject: int, seed: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11, subject]))
    tone = tuple(float(np.clip(c + rng.uniform(-0.06, 0.06), 0.05, 0.9)) for c in SKIN_RGB)
    center = (0.5 + rng.uniform(-0.05, 0.05), 0.5 + rng.uniform(-0.05, 0.05))
    axes = (0.38 * rng.uniform(0.9, 1.1), 0.30 * rng.uniform(0.9, 1.1))
    return {"skin_rgb": tone, "mask_center": center, "mask_axes": axes}


def window_spec(dist: SpecDistribution, seed: int, index: int, subject: int) -> SynthSpec:
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    hr = float(rng.uniform(*dist.hr))
    sbp = float(rng.uniform(*dist.sbp))
    dbp = sbp - float(rng.uniform(*dist.pulse_pressure))
    delay = float(np.clip(dist.delay_for(sbp), 0.0, 0.95 * 60.0 / hr))
    return SynthSpec(
        hr=hr, sbp=sbp, dbp=dbp, ptt_delay=delay, noise_sigma=dist.noise_sigma,
        illum_drift=tuple(dist.illum_drift), seed=int(rng.integers(2 ** 31)), H=dist.size,
        W=dist.size, jitter=dist.jitter, acral_cue=dist.acral_cue,
        face_delay_spread=dist.face_delay_spread, **_subject_look(subject, seed))


def make_dataset(n_windows: int, dist: SpecDistribution = SpecDistribution(), seed: int = 0,
                 ) -> list[WindowSample]:
    """Reproducible windows; splits are disjoint by synthetic subject."""
    splits = subject_splits(dist.n_subjects, dist.split_fractions, seed)
    out = []
    for i in range(n_windows):
        subject = i % dist.n_subjects
        spec = window_spec(dist, seed, i, subject)
        out.append(make_window(spec, f"w{i:05d}", subject, splits[subject]))
    return out


# -- persistence -------------------------------------------------------------
CLIP_LAYOUT = "CTHW"


def write_clip(clip: np.ndarray, directory: Path, rate: float = RATE) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "clip.f32").write_bytes(np.ascontiguousarray(clip, dtype="<f4").tobytes())
    header = {"shape": list(clip.shape), "layout": CLIP_LAYOUT, "dtype": "<f4", "rate": rate}
    (directory / "clip.json").write_text(json.dumps(header, indent=1))


def read_clip(directory) -> tuple[np.ndarray, float]:
    directory = Path(directory)
    try:
        header = json.loads((directory / "clip.json").read_text())
        shape = tuple(int(s) for s in header["shape"])
        if header.get("layout", CLIP_LAYOUT) != CLIP_LAYOUT or header.get("dtype", "<f4") != "<f4":
            raise SynthError(f"{directory}: unsupported clip layout/dtype")
        if len(shape) != 4 or shape[0] != 3:
            raise SynthError(f"{directory}: clip shape must be [3, T, H, W], got {shape}")
        rate = float(header.get("rate", RATE))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, SynthError):
            raise
        raise SynthError(f"{directory}: malformed clip header ({exc})") from exc
    raw = np.frombuffer((directory / "clip.f32").read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise SynthError(f"{directory}: clip data has {raw.size} values, header says {shape}")
    return raw.reshape(shape).astype(np.float32), rate


def write_window(w: WindowSample, directory: Path) -> None:
    write_clip(w.clip, directory, w.abp.rate)
    sig.write_signal_csv(w.abp, directory / "abp.csv")
    sig.write_signal_csv(w.pseudo_ppg, directory / "pseudo_ppg.csv")
    labels = {"window_id": w.window_id, "subject": w.subject, "split": w.split,
              "hr": w.hr_gt, "sbp": w.sbp_gt, "dbp": w.dbp_gt,
              "spec": w.spec.to_json() if w.spec else None}
    (directory / "labels.json").write_text(json.dumps(labels, indent=1, sort_keys=True))


def read_window(directory) -> WindowSample:
    """Load one window; ground truth is rebuilt from ABP when labels are absent."""
    directory = Path(directory)
    clip, rate = read_clip(directory)
    abp = sig.read_signal_csv(directory / "abp.csv", rate)
    lpath = directory / "labels.json"
    labels = json.loads(lpath.read_text()) if lpath.exists() else {}
    ppath = directory / "pseudo_ppg.csv"
    ppg = sig.read_signal_csv(ppath, rate) if ppath.exists() else sig.pseudo_ppg_from_abp(abp)
    hr = labels.get("hr", sig.heart_rate(ppg))
    if "sbp" in labels:
        sbp, dbp = labels["sbp"], labels["dbp"]
    else:
        sbp, dbp = sig.gt_bp_from_abp(abp)
    spec = SynthSpec.from_json(labels["spec"]) if labels.get("spec") else None
    return WindowSample(clip, abp, ppg, float(hr), float(sbp), float(dbp),
                        labels.get("window_id", directory.name), int(labels.get("subject", 0)),
                        labels.get("split", "train"), spec)


def write_dataset(windows: list[WindowSample], root, manifest: dict) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for w in windows:
        write_window(w, root / w.window_id)
    manifest = dict(manifest, n_windows=len(windows),
                    windows=[w.window_id for w in windows])
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def read_dataset(root, split: str | None = None) -> list[WindowSample]:
    root = Path(root)
    mpath = root / "manifest.json"
    if mpath.exists():
        ids = json.loads(mpath.read_text())["windows"]
    else:
        ids = sorted(p.name for p in root.iterdir() if (p / "clip.json").exists())
    out = [read_window(root / i) for i in ids]
    return [w for w in out if split is None or w.split == split]
