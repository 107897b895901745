"""Stage-2 network: stacked rPPG signals and derivatives -> bounded SBP and DBP."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import signal as sig
from .autodiff import tensor as ad
from .autodiff.nn import Conv1d, Linear, Module
from .autodiff.tensor import Tensor
from .signal import PhysioSignal

STACK_ORDER = ("facial", "acral", "vpg_facial", "vpg_acral", "apg_facial", "apg_acral")
INPUT_MODES = ("both", "facial", "acral")


@dataclass(frozen=True)
class BpBounds:
    sbp_min: float = 85.0
    sbp_max: float = 155.0
    dbp_min: float = 45.0
    dbp_max: float = 95.0
    tau: float = 2.0

    def __post_init__(self):
        if not (self.sbp_min < self.sbp_max and self.dbp_min < self.dbp_max):
            raise ValueError("each bound pair needs min < max")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _scaled_sigmoid_np(z, lo, hi, tau):
    z = np.asarray(z, dtype=np.float64)
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z) / tau)),
                 np.exp(-np.abs(z) / tau) / (1.0 + np.exp(-np.abs(z) / tau)))
    out = lo + (hi - lo) * s
    return np.clip(out, np.nextafter(lo, hi), np.nextafter(hi, lo))


def scaled_sigmoid(z, lo: float, hi: float, tau: float = 2.0):
    """``lo + (hi - lo) * sigmoid(z / tau)``, kept strictly inside (lo, hi).

    Where rounding would land exactly on a bound the value is nudged one ulp
    inward (the gradient there is already zero to working precision).
    """
    if not hi > lo or tau <= 0:
        raise ValueError("scaled_sigmoid needs hi > lo and tau > 0")
    if not isinstance(z, Tensor):
        return _scaled_sigmoid_np(z, lo, hi, tau)
    out = ad.sigmoid(z * (1.0 / tau)) * (hi - lo) + lo
    dt = out.dtype.type
    lo_in, hi_in = np.nextafter(dt(lo), dt(hi)), np.nextafter(dt(hi), dt(lo))
    out = ad.where_const(out.data < hi_in, out, float(hi_in))
    return ad.where_const(out.data > lo_in, out, float(lo_in))


def build_bbp_input(facial: PhysioSignal, acral: PhysioSignal) -> np.ndarray:
    """Six standardized channels in :data:`STACK_ORDER`, shape ``[6, T]``."""
    if facial.samples.size != acral.samples.size:
        raise ValueError(f"length mismatch: {facial.samples.size} vs {acral.samples.size}")
    chans = [facial, acral,
             sig.derivative(facial, 1), sig.derivative(acral, 1),
             sig.derivative(facial, 2), sig.derivative(acral, 2)]
    return np.stack([sig.standardize(c).samples for c in chans])


def build_bbp_batch(facial: np.ndarray, acral: np.ndarray, rate: float = sig.DEFAULT_RATE,
                    mode: str = "both") -> np.ndarray:
    """``[N, 6, T]`` float32 stacks; single-signal modes put one signal in both slots."""
    if mode not in INPUT_MODES:
        raise ValueError(f"mode must be one of {INPUT_MODES}")
    facial = np.atleast_2d(facial)
    acral = np.atleast_2d(acral)
    if mode == "facial":
        acral = facial
    elif mode == "acral":
        facial = acral
    rows = [build_bbp_input(PhysioSignal(f, rate), PhysioSignal(a, rate))
            for f, a in zip(facial, acral)]
    return np.stack(rows).astype(np.float32)


class DwsBranch(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng):
        super().__init__()
        self.depthwise = Conv1d(cin, cin, kernel, 1, cin, rng)
        self.pointwise = Conv1d(cin, cout, 1, 1, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ad.hardswish(self.pointwise(self.depthwise(x)))


class MsfBlock(Module):
    """Parallel k=3/k=5 depthwise-separable branches mixed by per-channel softmax weights."""

    def __init__(self, cin: int, cout: int, c_mid: int, rng):
        super().__init__()
        self.branch3 = DwsBranch(cin, cout, 3, rng)
        self.branch5 = DwsBranch(cin, cout, 5, rng)
        self.squeeze = Linear(cout, c_mid, rng)
        self.logits3 = Linear(c_mid, cout, rng)
        self.logits5 = Linear(c_mid, cout, rng)
        self.project = Conv1d(cin, cout, 1, 1, 1, rng) if cin != cout else None

    def branch_weights(self, b3: Tensor, b5: Tensor) -> Tensor:
        """Softmax weights ``[N, 2, C]`` over the two branches."""
        s = (b3 + b5).mean(axis=-1)
        z = ad.hardswish(self.squeeze(s))
        logits = ad.stack([self.logits3(z), self.logits5(z)], axis=1)
        return ad.softmax(logits, axis=1)

    def residual(self, x: Tensor) -> Tensor:
        return x if self.project is None else self.project(x)

    def forward(self, x: Tensor) -> Tensor:
        b3, b5 = self.branch3(x), self.branch5(x)
        a = self.branch_weights(b3, b5)
        n, _, c = a.shape
        mixed = b3 * a[:, 0].reshape((n, c, 1)) + b5 * a[:, 1].reshape((n, c, 1))
        return mixed + self.residual(x)


class BpHead(Module):
    """Bottleneck attention (channel + temporal gate) with a residual, pooled to one score."""

    def __init__(self, c: int, reduction: int, dilation: int, rng):
        super().__init__()
        r = max(1, c // reduction)
        self.ch_down = Linear(c, r, rng)
        self.ch_up = Linear(r, c, rng)
        self.tp_down = Conv1d(c, r, 1, 1, 1, rng)
        self.tp_mid = Conv1d(r, r, 3, dilation, 1, rng)
        self.tp_out = Conv1d(r, 1, 1, 1, 1, rng)
        self.out = Linear(c, 1, rng)

    def gate(self, f: Tensor) -> Tensor:
        n, c, _ = f.shape
        ch = self.ch_up(ad.relu(self.ch_down(f.mean(axis=-1)))).reshape((n, c, 1))
        tp = self.tp_out(ad.relu(self.tp_mid(ad.relu(self.tp_down(f)))))
        return ad.sigmoid(ch + tp)

    def forward(self, f: Tensor) -> Tensor:
        refined = f + f * self.gate(f)
        z = self.out(refined.mean(axis=-1))
        return z.reshape((z.shape[0],))


@dataclass(frozen=True)
class BbpConfig:
    stem: int = 32
    blocks: tuple[tuple[int, int], ...] = ((32, 32), (32, 64), (64, 64), (64, 64))
    c_mid: int = 16
    head_reduction: int = 4
    head_dilation: int = 4
    bounds: BpBounds = BpBounds()
    input_mode: str = "both"
    seed: int = 0

    def __post_init__(self):
        c = self.stem
        for cin, cout in self.blocks:
            if cin != c:
                raise ValueError(f"block input {cin} does not follow previous width {c}")
            c = cout
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "BbpConfig":
        obj = dict(obj)
        obj["blocks"] = tuple(tuple(b) for b in obj.get("blocks", cls.blocks))
        obj["bounds"] = BpBounds(**obj["bounds"]) if "bounds" in obj else BpBounds()
        return cls(**obj)


class BbpNet(Module):
    def __init__(self, config: BbpConfig = BbpConfig()):
        super().__init__()
        object.__setattr__(self, "config", config)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        self.stem = Conv1d(len(STACK_ORDER), config.stem, 1, 1, 1, rng)
        self.n_blocks = len(config.blocks)
        for i, (cin, cout) in enumerate(config.blocks):
            setattr(self, f"msf{i}", MsfBlock(cin, cout, config.c_mid, rng))
        width = config.blocks[-1][1] if config.blocks else config.stem
        self.sbp_head = BpHead(width, config.head_reduction, config.head_dilation, rng)
        self.dbp_head = BpHead(width, config.head_reduction, config.head_dilation, rng)

    def features(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[1] != len(STACK_ORDER):
            raise ValueError(f"BBP input must be [N, 6, T], got {x.shape}")
        h = self.stem(x)
        for i in range(self.n_blocks):
            h = getattr(self, f"msf{i}")(h)
        return h

    def scores(self, x) -> tuple[Tensor, Tensor]:
        h = self.features(x)
        return self.sbp_head(h), self.dbp_head(h)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        """``(sbp_hat, dbp_hat)``, each ``[N]`` mmHg."""
        b = self.config.bounds
        z_s, z_d = self.scores(x)
        return (scaled_sigmoid(z_s, b.sbp_min, b.sbp_max, b.tau),
                scaled_sigmoid(z_d, b.dbp_min, b.dbp_max, b.tau))


def bbp_forward(net: BbpNet, stack) -> tuple[Tensor, Tensor]:
    x = ad.as_tensor(stack)
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
    return net(x)
