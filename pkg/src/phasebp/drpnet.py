"""Stage-1 network: facial clip -> facial-phase and acral-phase rPPG signals.

Layout of every activation is ``[N, C, T, H, W]``; unbatched ``[C, T, H, W]``
inputs are accepted and the batch axis is dropped again on output.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import functional as F
from .autodiff import tensor as ad
from .autodiff.nn import Conv1d, Conv3d, Module
from .autodiff.tensor import Tensor
from .signal import PhysioSignal


@dataclass(frozen=True)
class DrpConfig:
    T: int = 150
    H: int = 128
    W: int = 128
    channels: tuple[int, ...] = (3, 16, 32, 64, 64, 64, 64, 64)
    kernel: tuple[int, int, int] = (3, 3, 3)
    dilations: tuple[int, ...] = (1, 1, 2, 2, 4, 4, 1)  # temporal dilation per layer
    pools: tuple[tuple[int, int], ...] = ((2, 4), (4, 4), (6, 2))  # (after layer, spatial kernel)
    m_inter_layer: int = 3  # 1-based layer whose output feeds the attention modules
    activation: str = "relu"
    attention_channels: int = 16
    head_channels: tuple[int, ...] = (32, 32, 32)
    head_dilations: tuple[int, ...] = (1, 2, 4)
    head_kernel: int = 3
    head_activation: str = "hardswish"
    seed: int = 0

    def __post_init__(self):
        n_layers = len(self.channels) - 1
        if self.channels[0] != 3:
            raise ValueError("first channel count must be 3 (RGB)")
        if len(self.dilations) != n_layers:
            raise ValueError(f"{n_layers} layers but {len(self.dilations)} dilations")
        if len(self.head_channels) != len(self.head_dilations):
            raise ValueError("head_channels and head_dilations differ in length")
        if not 1 <= self.m_inter_layer <= n_layers:
            raise ValueError("m_inter_layer out of range")
        h, w = self.H, self.W
        for layer, k in sorted(self.pools):
            if not 1 <= layer <= n_layers:
                raise ValueError(f"pool after missing layer {layer}")
            if h % k or w % k:
                raise ValueError(f"spatial size {h}x{w} not divisible by pool {k}")
            h, w = h // k, w // k
        if (h, w) != (4, 4):
            raise ValueError(f"pool schedule ends at {h}x{w}, expected 4x4")
        ih, iw = self.inter_size
        if ih % 4 or iw % 4:
            raise ValueError("m_inter spatial size must be a multiple of 4")

    @property
    def n_layers(self) -> int:
        return len(self.channels) - 1

    def size_after(self, layer: int) -> tuple[int, int]:
        h, w = self.H, self.W
        for after, k in self.pools:
            if after <= layer:
                h, w = h // k, w // k
        return h, w

    @property
    def inter_size(self) -> tuple[int, int]:
        # the map leaving layer m_inter_layer, before any pool that follows it
        return self.size_after(self.m_inter_layer - 1)

    @property
    def feature_channels(self) -> int:
        return self.channels[-1]

    @property
    def inter_channels(self) -> int:
        return self.channels[self.m_inter_layer]

    def receptive_halfwidth(self, layer: int | None = None) -> int:
        """Frames on each side of t that can influence time t after ``layer`` layers."""
        layer = self.n_layers if layer is None else layer
        return sum(d * (self.kernel[0] // 2) for d in self.dilations[:layer])

    def replace(self, **kw) -> "DrpConfig":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "DrpConfig":
        def tup(v):
            return tuple(tup(x) for x in v) if isinstance(v, list) else v
        return cls(**{k: tup(v) for k, v in obj.items()})


PROFILES = {
    "full": DrpConfig(),
    # desk-scale: 16x16 ROI, so only two 2x2 pools are needed to reach 4x4
    "small": DrpConfig(H=16, W=16, channels=(3, 4, 8, 8, 8, 8, 8, 8),
                       pools=((2, 2), (4, 2)), attention_channels=8,
                       head_channels=(8, 8, 8)),
}


def profile(name: str, **overrides) -> DrpConfig:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return PROFILES[name].replace(**overrides)


@dataclass
class DrpOutputs:
    facial: Tensor  # [N, T]
    acral: Tensor  # [N, T]
    feature_map: Tensor  # refined map, [N, C, T, 4, 4]
    alpha_t: Tensor | None = None
    alpha_s: Tensor | None = None
    extras: dict = field(default_factory=dict)

    def signals(self, rate: float = 25.0, index: int = 0) -> tuple[PhysioSignal, PhysioSignal]:
        return (PhysioSignal(self.facial.data[index], rate),
                PhysioSignal(self.acral.data[index], rate))


def refine(m: Tensor, alpha_t: Tensor, alpha_s: Tensor) -> Tensor:
    """Broadcast product of the feature map with temporal and spatial attention."""
    t_ok = alpha_t.shape[-4:] == (1, m.shape[-3], 1, 1)
    s_ok = alpha_s.shape[-4:] == (1, 1) + tuple(m.shape[-2:])
    if not (t_ok and s_ok):
        raise ValueError(f"refine: attention shapes {alpha_t.shape}, {alpha_s.shape} "
                         f"do not broadcast against {m.shape}")
    return m * alpha_t * alpha_s


class _Attention(Module):
    def __init__(self, cin: int, mid: int, rng):
        super().__init__()
        self.conv = Conv3d(cin, mid, (1, 3, 3), (1, 1, 1), rng)
        self.score = Conv3d(2 * mid, 1, (1, 1, 1), (1, 1, 1), rng)

    def _pooled(self, m_inter: Tensor, kernel) -> Tensor:
        a = self.conv(m_inter)
        both = ad.concat([F.pool_blocks(a, kernel, "max"), F.pool_blocks(a, kernel, "mean")], axis=1)
        return ad.sigmoid(self.score(both))


class SpatialAttention(_Attention):
    def forward(self, m_inter: Tensor) -> Tensor:
        T, h, w = m_inter.shape[-3:]
        return self._pooled(m_inter, (T, h // 4, w // 4))


class TemporalAttention(_Attention):
    def forward(self, m_inter: Tensor) -> Tensor:
        h, w = m_inter.shape[-2:]
        return self._pooled(m_inter, (1, h, w))


class Head(Module):
    """Dilated 1-D conv stack ending in a pointwise projection to one signal."""

    def __init__(self, cin: int, channels, dilations, kernel: int, act: str, rng):
        super().__init__()
        self.act = act
        self.n = len(channels)
        c = cin
        for i, (cout, d) in enumerate(zip(channels, dilations)):
            setattr(self, f"conv{i}", Conv1d(c, cout, kernel, d, 1, rng))
            c = cout
        self.out = Conv1d(c, 1, 1, 1, 1, rng)

    def forward(self, z: Tensor) -> Tensor:
        for i in range(self.n):
            z = ad.activation(getattr(self, f"conv{i}")(z), self.act)
        y = self.out(z)
        return y.reshape((y.shape[0], y.shape[-1]))


class DrpNet(Module):
    def __init__(self, config: DrpConfig = DrpConfig()):
        super().__init__()
        object.__setattr__(self, "config", config)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        ch = config.channels
        for i in range(config.n_layers):
            setattr(self, f"conv{i + 1}", Conv3d(ch[i], ch[i + 1], config.kernel,
                                                 (config.dilations[i], 1, 1), rng))
        self.spatial = SpatialAttention(config.inter_channels, config.attention_channels, rng)
        self.temporal = TemporalAttention(config.inter_channels, config.attention_channels, rng)
        head_args = (config.feature_channels, config.head_channels, config.head_dilations,
                     config.head_kernel, config.head_activation)
        self.facial_head = Head(*head_args, rng)
        self.acral_head = Head(*head_args, rng)

    # -- stages -----------------------------------------------------------
    def _check_input(self, x: Tensor) -> tuple[Tensor, bool]:
        c = self.config
        squeeze = x.ndim == 4
        xb = x.reshape((1,) + x.shape) if squeeze else x
        if xb.ndim != 5 or xb.shape[1:] != (3, c.T, c.H, c.W):
            raise ValueError(f"DRP input must be [N, 3, {c.T}, {c.H}, {c.W}], got {x.shape}")
        return xb, squeeze

    def feature_extractor(self, x) -> tuple[Tensor, Tensor]:
        """Returns ``(m_inter, m)``; both keep the temporal length."""
        x, squeeze = self._check_input(ad.as_tensor(x))
        pools = dict(self.config.pools)
        m_inter = None
        for i in range(1, self.config.n_layers + 1):
            x = ad.activation(getattr(self, f"conv{i}")(x), self.config.activation)
            if i == self.config.m_inter_layer:
                m_inter = x
            if i in pools:
                x = F.maxpool_spatial(x, (1, pools[i], pools[i]))
        if squeeze:
            return m_inter.reshape(m_inter.shape[1:]), x.reshape(x.shape[1:])
        return m_inter, x

    def spatial_attention(self, m_inter: Tensor) -> Tensor:
        return self.spatial(m_inter)

    def temporal_attention(self, m_inter: Tensor) -> Tensor:
        return self.temporal(m_inter)

    def rppg_heads(self, beta: Tensor) -> tuple[Tensor, Tensor]:
        squeeze = beta.ndim == 4
        b = beta.reshape((1,) + beta.shape) if squeeze else beta
        z = b.mean(axis=(3, 4))
        facial, acral = self.facial_head(z), self.acral_head(z)
        if squeeze:
            return facial.reshape(facial.shape[1:]), acral.reshape(acral.shape[1:])
        return facial, acral

    def forward(self, x) -> DrpOutputs:
        x = ad.as_tensor(x)
        squeeze = x.ndim == 4
        xb = x.reshape((1,) + x.shape) if squeeze else x
        m_inter, m = self.feature_extractor(xb)
        a_t = self.temporal_attention(m_inter)
        a_s = self.spatial_attention(m_inter)
        beta = refine(m, a_t, a_s)
        facial, acral = self.rppg_heads(beta)
        if squeeze:
            return DrpOutputs(facial.reshape(facial.shape[1:]), acral.reshape(acral.shape[1:]),
                              beta.reshape(beta.shape[1:]), a_t, a_s)
        return DrpOutputs(facial, acral, beta, a_t, a_s)

    def tie_heads(self) -> None:
        """Copy the facial head's parameters into the acral head."""
        src = dict(self.facial_head.named_parameters())
        for name, p in self.acral_head.named_parameters():
            p.data = src[name].data.copy()

    def describe(self) -> dict:
        c = self.config
        layers = []
        pools = dict(c.pools)
        for i in range(1, c.n_layers + 1):
            h, w = c.size_after(i - 1)
            layers.append({"layer": i, "type": "conv3d", "in": c.channels[i - 1],
                           "out": c.channels[i], "kernel": list(c.kernel),
                           "dilation": [c.dilations[i - 1], 1, 1], "activation": c.activation,
                           "output_shape": [c.channels[i], c.T, h, w],
                           "pool_after": [1, pools[i], pools[i]] if i in pools else None,
                           "m_inter_tap": i == c.m_inter_layer})
        ih, iw = c.inter_size
        return {
            "config": c.to_json(),
            "layers": layers,
            "m_inter_shape": [c.inter_channels, c.T, ih, iw],
            "m_shape": [c.feature_channels, c.T, 4, 4],
            "attention": {"spatial_output": [1, 1, 4, 4], "temporal_output": [1, c.T, 1, 1],
                          "conv_kernel": [1, 3, 3], "mid_channels": c.attention_channels},
            "heads": {"channels": list(c.head_channels), "dilations": list(c.head_dilations),
                      "kernel": c.head_kernel, "activation": c.head_activation,
                      "spatial_reduction": "global_average"},
            "receptive_halfwidth_frames": c.receptive_halfwidth(),
            "num_parameters": self.num_parameters(),
        }

    def describe_json(self) -> str:
        return json.dumps(self.describe(), indent=1)
