"""Temporal augmentation: halve or double the pulse rate of a training window.

A slowed window stretches the first half of a clip to full length by inserting
a blended frame between each adjacent pair; a sped-up window keeps every
second frame of a clip twice as long.  ABP is resampled the same way so the
BP labels of the source carry over unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import signal as sig
from . import synth
from .signal import PhysioSignal
from .synth import WindowSample

MODES = {"none": 1.0, "slow": 0.5, "fast": 2.0}
HR_LIMITS = (30.0, 180.0)


class AugmentError(ValueError):
    pass


def blend_frames(a: np.ndarray, b: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Pixelwise convex combination ``(1 - alpha) * a + alpha * b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise AugmentError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise AugmentError(f"alpha must lie in [0, 1], got {alpha}")
    return ((1.0 - alpha) * a + alpha * b).astype(a.dtype, copy=False)


def _stretch(x: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    half = n_out // 2
    avail = x.shape[axis]
    if n_out % 2:
        raise AugmentError(f"output length must be even, got {n_out}")
    if avail < half:
        raise AugmentError(f"slow_down needs {half} source frames, got {avail}")
    x = np.moveaxis(x, axis, 0)
    src = x[:half]
    # the frame after the last one, when present, completes the final pair
    nxt = x[1:half + 1] if avail > half else np.concatenate([x[1:half], x[half - 1:half]])
    out = np.empty((n_out,) + x.shape[1:], dtype=x.dtype)
    out[0::2] = src
    out[1::2] = blend_frames(src, nxt, 0.5)
    return np.moveaxis(out, 0, axis)


def _compress(x: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    if x.shape[axis] < 2 * n_out:
        raise AugmentError(f"speed_up needs {2 * n_out} source frames, got {x.shape[axis]}")
    idx = np.arange(n_out) * 2
    return np.take(x, idx, axis=axis)


def slow_down(clip: np.ndarray, T: int | None = None) -> np.ndarray:
    """``[3, >=T/2, H, W]`` -> ``[3, T, H, W]``; output frame 2k is input frame k."""
    T = 2 * clip.shape[1] if T is None else T
    return _stretch(clip, T, axis=1)


def speed_up(clip: np.ndarray, T: int | None = None) -> np.ndarray:
    """``[3, >=2T, H, W]`` -> ``[3, T, H, W]``; output frame k is input frame 2k."""
    T = clip.shape[1] // 2 if T is None else T
    return _compress(clip, T, axis=1)


def slow_down_signal(x: PhysioSignal, n: int) -> PhysioSignal:
    return x.with_samples(_stretch(x.samples, n, axis=0)[:n])


def speed_up_signal(x: PhysioSignal, n: int) -> PhysioSignal:
    return x.with_samples(_compress(x.samples, n, axis=0))


@dataclass
class AugmentedWindow:
    clip: np.ndarray
    label_scale: float
    provenance: dict
    abp: PhysioSignal
    pseudo_ppg: PhysioSignal
    hr_gt: float
    sbp_gt: float
    dbp_gt: float

    def as_window(self) -> WindowSample:
        src = self.provenance["source"]
        return WindowSample(self.clip, self.abp, self.pseudo_ppg, self.hr_gt, self.sbp_gt,
                            self.dbp_gt, f"{src}-{self.provenance['mode']}",
                            self.provenance.get("subject", 0), "train")


def _source_frames(w: WindowSample, n: int) -> tuple[np.ndarray, PhysioSignal]:
    """Clip and ABP of ``n`` frames starting where ``w`` starts."""
    T = w.clip.shape[1]
    if n <= T:
        return w.clip[:, :n], w.abp.with_samples(w.abp.samples[:n])
    if w.spec is None:
        raise AugmentError(f"{w.window_id}: need {n} source frames but only {T} are stored "
                           "and no generator spec is attached")
    return synth.gen_clip(w.spec, n), synth.gen_abp(w.spec, n)


def augment_window(w: WindowSample, mode: str) -> AugmentedWindow | None:
    """Apply one mode; returns None when the scaled HR leaves the analysis band."""
    if mode not in MODES:
        raise AugmentError(f"unknown mode {mode!r}; expected one of {sorted(MODES)}")
    scale = MODES[mode]
    hr = w.hr_gt * scale
    if w.spec is not None:
        hr = w.spec.hr * scale
    if not HR_LIMITS[0] <= hr <= HR_LIMITS[1]:
        return None
    T = w.clip.shape[1]
    prov = {"source": w.window_id, "mode": mode, "subject": w.subject}
    if mode == "none":
        return AugmentedWindow(w.clip, 1.0, prov, w.abp, w.pseudo_ppg, w.hr_gt, w.sbp_gt, w.dbp_gt)
    if mode == "slow":
        clip_src, abp_src = _source_frames(w, T // 2 + 1)
        clip = slow_down(clip_src, T)
        abp = slow_down_signal(abp_src, T)
    else:
        clip_src, abp_src = _source_frames(w, 2 * T)
        clip = speed_up(clip_src, T)
        abp = speed_up_signal(abp_src, T)
    return AugmentedWindow(clip, scale, prov, abp, sig.pseudo_ppg_from_abp(abp), hr,
                           w.sbp_gt, w.dbp_gt)


@dataclass
class AugmentPlan:
    """Per-window mode assignment, reproducible from its JSON form."""

    seed: int
    ratios: dict = field(default_factory=lambda: {"none": 1 / 3, "slow": 1 / 3, "fast": 1 / 3})
    assignments: dict = field(default_factory=dict)
    rejected: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"seed": self.seed, "ratios": self.ratios, "assignments": self.assignments,
                "rejected": self.rejected}

    @classmethod
    def from_json(cls, obj: dict) -> "AugmentPlan":
        return cls(int(obj["seed"]), dict(obj["ratios"]), dict(obj["assignments"]),
                   list(obj.get("rejected", [])))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "AugmentPlan":
        return cls.from_json(json.loads(Path(path).read_text()))


def make_plan(windows: list[WindowSample], seed: int, ratios: dict | None = None) -> AugmentPlan:
    """Draw a mode per training window; validation/test windows stay unaugmented."""
    plan = AugmentPlan(seed) if ratios is None else AugmentPlan(seed, dict(ratios))
    if set(plan.ratios) - set(MODES) or any(v < 0 for v in plan.ratios.values()):
        raise AugmentError(f"ratios must be non-negative weights over {sorted(MODES)}")
    names = sorted(plan.ratios)
    p = np.array([plan.ratios[k] for k in names], dtype=np.float64)
    if p.sum() <= 0:
        raise AugmentError("ratios sum to zero")
    p = p / p.sum()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    for w in windows:
        if w.split != "train":
            plan.assignments[w.window_id] = "none"
            continue
        mode = names[int(rng.choice(len(names), p=p))]
        hr = (w.spec.hr if w.spec is not None else w.hr_gt) * MODES[mode]
        if not HR_LIMITS[0] <= hr <= HR_LIMITS[1]:
            plan.rejected.append({"window": w.window_id, "mode": mode})
            mode = "none"
        plan.assignments[w.window_id] = mode
    return plan


def apply_plan(windows: list[WindowSample], plan: AugmentPlan) -> list[WindowSample]:
    out = []
    for w in windows:
        aug = augment_window(w, plan.assignments.get(w.window_id, "none"))
        out.append(w if aug is None else (w if aug.label_scale == 1.0 else aug.as_window()))
    return out
