"""Parameter containers and the handful of layers the two networks use."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Ordered registry of parameters (leaf tensors) and child modules."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.dtype))

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv3d(Module):
    def __init__(self, cin, cout, kernel=(3, 3, 3), dilation=(1, 1, 1), rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.kernel = tuple(kernel)
        self.dilation = tuple(dilation)
        fan_in = cin * int(np.prod(self.kernel))
        self.weight = Tensor(uniform_init(rng, (cout, cin) + self.kernel, fan_in), requires_grad=True)
        self.bias = Tensor(uniform_init(rng, (cout,), fan_in), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, self.kernel, self.dilation, 1, "same")


class Conv1d(Module):
    def __init__(self, cin, cout, kernel=1, dilation=1, groups=1, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.kernel = int(kernel)
        self.dilation = int(dilation)
        self.groups = int(groups)
        fan_in = (cin // groups) * self.kernel
        self.weight = Tensor(uniform_init(rng, (cout, cin // groups, self.kernel), fan_in),
                             requires_grad=True)
        self.bias = Tensor(uniform_init(rng, (cout,), fan_in), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, (self.kernel,), self.dilation, 1, "same",
                        self.groups)


class Linear(Module):
    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(uniform_init(rng, (n_out, n_in), n_in), requires_grad=True)
        self.bias = Tensor(uniform_init(rng, (n_out,), n_in), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)
