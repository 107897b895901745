"""Convolution, pooling and affine ops on :class:`Tensor`.

Kernels are batched (leading N axis).  The public ``conv3d``/``conv1d``/
``maxpool_spatial`` also accept the unbatched ``[C, ...]`` layout and return
the same layout they were given.
"""

from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _make, as_tensor

# Cap on im2col scratch (elements) before the batch is processed in chunks.
_COLS_BUDGET = 24_000_000


def _tuple(v, n: int) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def same_padding(kernel, dilation) -> tuple[int, ...]:
    """Zero padding that preserves length for odd kernels at stride 1."""
    return tuple(d * (k - 1) // 2 for k, d in zip(kernel, dilation))


def conv_output_shape(size, kernel, dilation, stride, padding) -> tuple[int, ...]:
    return tuple(
        (n + 2 * p - d * (k - 1) - 1) // s + 1
        for n, k, d, s, p in zip(size, kernel, dilation, stride, padding)
    )


def _windows(xp: np.ndarray, kernel, dilation, stride, out_shape) -> np.ndarray:
    """View [N, C, *out, *kernel] of the padded input; no copy."""
    nd = len(kernel)
    span = tuple(d * (k - 1) + 1 for k, d in zip(kernel, dilation))
    axes = tuple(range(2, 2 + nd))
    v = sliding_window_view(xp, span, axis=axes)
    sl = (slice(None), slice(None))
    sl += tuple(slice(0, o * s, s) for o, s in zip(out_shape, stride))
    sl += tuple(slice(None, None, d) for d in dilation)
    return v[sl]


def _offset_slices(kernel, dilation, stride, out_shape):
    """For each kernel offset, the slice of the padded input it multiplies."""
    for offs in itertools.product(*[range(k) for k in kernel]):
        yield offs, tuple(slice(o * d, o * d + (m - 1) * s + 1, s)
                          for o, d, m, s in zip(offs, dilation, out_shape, stride))


def _columns(xc: np.ndarray, kernel, dilation, stride, out_shape) -> np.ndarray:
    """Patch matrix ``[Cin * K, N * prod(out)]`` from a channel-first padded input."""
    cin, n = xc.shape[:2]
    k = int(np.prod(kernel))
    cols = np.empty((cin, k, n) + tuple(out_shape), dtype=xc.dtype)
    for j, (_, sl) in enumerate(_offset_slices(kernel, dilation, stride, out_shape)):
        cols[:, j] = xc[(slice(None), slice(None)) + sl]
    return cols.reshape(cin * k, -1)


def _chunks(n: int, per_sample: int):
    step = max(1, _COLS_BUDGET // max(per_sample, 1))
    return [(i, min(n, i + step)) for i in range(0, n, step)]


def _pad_channel_first(x, padding):
    xc = np.moveaxis(x, 1, 0)
    if any(padding):
        xc = np.pad(xc, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    return np.ascontiguousarray(xc)


class _FlatGrid:
    """Stride-1 convolution evaluated on the flattened padded grid.

    Every kernel offset becomes a single shift of the flat index, so each
    patch-matrix row is one contiguous copy.  Positions that straddle a row
    boundary are computed and then discarded.
    """

    def __init__(self, padded, kernel, dilation, out_shape):
        self.padded = tuple(padded)
        self.out_shape = tuple(out_shape)
        nd = len(padded)
        self.strides = tuple(int(np.prod(padded[i + 1:])) for i in range(nd))
        self.shifts = [sum(o * d * st for o, d, st in zip(offs, dilation, self.strides))
                       for offs in itertools.product(*[range(k) for k in kernel])]
        self.span = sum((o - 1) * st for o, st in zip(out_shape, self.strides)) + 1
        self.length = int(np.prod(padded))

    def columns(self, xf: np.ndarray) -> np.ndarray:
        """``[Cin * K, N * span]`` from ``xf`` of shape ``[Cin, N, length]``."""
        cin, n = xf.shape[:2]
        cols = np.empty((cin, len(self.shifts), n, self.span), dtype=xf.dtype)
        for j, sh in enumerate(self.shifts):
            cols[:, j] = xf[:, :, sh:sh + self.span]
        return cols.reshape(cin * len(self.shifts), n * self.span)

    def crop(self, yf: np.ndarray) -> np.ndarray:
        """``[C, N, span]`` -> ``[C, N, *out_shape]``."""
        c, n = yf.shape[:2]
        full = np.zeros((c, n, self.out_shape[0] * self.strides[0]), dtype=yf.dtype)
        full[:, :, :self.span] = yf
        full = full.reshape((c, n, self.out_shape[0]) + self.padded[1:])
        return full[(slice(None), slice(None), slice(None))
                    + tuple(slice(0, o) for o in self.out_shape[1:])]

    def embed(self, g: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`crop`: ``[C, N, *out_shape]`` -> ``[C, N, span]`` with zeros."""
        c, n = g.shape[:2]
        full = np.zeros((c, n, self.out_shape[0]) + self.padded[1:], dtype=g.dtype)
        full[(slice(None), slice(None), slice(None))
             + tuple(slice(0, o) for o in self.out_shape[1:])] = g
        return full.reshape(c, n, -1)[:, :, :self.span]


def _flat_input(x, padding):
    xc = _pad_channel_first(x, padding)
    return xc.reshape(xc.shape[:2] + (-1,)), xc.shape[2:]


def _flat_forward(x, w, kernel, dilation, padding, out_shape):
    n, cin = x.shape[:2]
    cout = w.shape[0]
    xf, padded = _flat_input(x, padding)
    grid = _FlatGrid(padded, kernel, dilation, out_shape)
    wm = np.ascontiguousarray(w.reshape(cout, -1))
    per_sample = cin * len(grid.shifts) * grid.span
    yf = np.empty((cout, n, grid.span), dtype=np.result_type(x, w))
    for i, j in _chunks(n, per_sample):
        yf[:, i:j] = (wm @ grid.columns(xf[:, i:j])).reshape(cout, j - i, grid.span)
    return np.ascontiguousarray(np.moveaxis(grid.crop(yf), 0, 1))


def _flat_backward(g, x, w, kernel, dilation, padding, out_shape, need_gx):
    n, cin = x.shape[:2]
    cout = w.shape[0]
    xf, padded = _flat_input(x, padding)
    grid = _FlatGrid(padded, kernel, dilation, out_shape)
    gf = np.ascontiguousarray(grid.embed(np.moveaxis(g, 1, 0)))  # [cout, N, span]
    per_sample = cin * len(grid.shifts) * grid.span
    gw = np.zeros((cout, cin * len(grid.shifts)), dtype=np.result_type(g, x))
    for i, j in _chunks(n, per_sample):
        gw += gf[:, i:j].reshape(cout, -1) @ grid.columns(xf[:, i:j]).T
    gw = gw.reshape(w.shape)
    if not need_gx:
        return None, gw
    gflat = gf.reshape(cout, -1)
    gxf = np.zeros((cin, n, grid.length), dtype=np.result_type(g, w))
    for offs, sh in zip(itertools.product(*[range(k) for k in kernel]), grid.shifts):
        wk = np.ascontiguousarray(w[(slice(None), slice(None)) + offs].T)  # [cin, cout]
        gxf[:, :, sh:sh + grid.span] += (wk @ gflat).reshape(cin, n, grid.span)
    gxc = gxf.reshape((cin, n) + tuple(padded))
    if any(padding):
        gxc = gxc[(slice(None), slice(None)) + tuple(
            slice(p, p + s) for p, s in zip(padding, x.shape[2:]))]
    return np.ascontiguousarray(np.moveaxis(gxc, 0, 1)), gw


def _conv_forward(x, w, kernel, dilation, stride, padding, groups):
    n, cin = x.shape[:2]
    nd = len(kernel)
    cout = w.shape[0]
    out_shape = conv_output_shape(x.shape[2:], kernel, dilation, stride, padding)
    xp_shape = x.shape[:2] + tuple(s + 2 * p for s, p in zip(x.shape[2:], padding))
    if groups == 1 and all(s == 1 for s in stride):
        return _flat_forward(x, w, kernel, dilation, padding, out_shape), xp_shape, out_shape
    if groups == 1:
        xc = _pad_channel_first(x, padding)
        wm = np.ascontiguousarray(w.reshape(cout, -1))
        per_sample = cin * int(np.prod(kernel)) * int(np.prod(out_shape))
        out = np.empty((cout, n) + tuple(out_shape), dtype=np.result_type(x, w))
        for i, j in _chunks(n, per_sample):
            cols = _columns(xc[:, i:j], kernel, dilation, stride, out_shape)
            out[:, i:j] = (wm @ cols).reshape((cout, j - i) + tuple(out_shape))
        return np.ascontiguousarray(np.moveaxis(out, 0, 1)), xp_shape, out_shape
    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding]) if any(padding) else x
    win = _windows(xp, kernel, dilation, stride, out_shape)
    cg, og = cin // groups, cout // groups
    wg = w.reshape((groups, og, cg) + tuple(kernel))
    wv = win.reshape((n, groups, cg) + win.shape[2:])
    letters = "abcdef"[:nd]
    klet = "uvwxyz"[:nd]
    expr = f"ngc{letters}{klet},goc{klet}->ngo{letters}"
    out = np.einsum(expr, wv, wg, optimize=True).reshape((n, cout) + out_shape)
    return np.ascontiguousarray(out), xp_shape, out_shape


def _conv_backward(g, x, w, kernel, dilation, stride, padding, groups, xp_shape, out_shape,
                   need_gx=True):
    n, cin = x.shape[:2]
    nd = len(kernel)
    cout = w.shape[0]
    if groups == 1 and all(s == 1 for s in stride):
        return _flat_backward(g, x, w, kernel, dilation, padding, out_shape, need_gx)
    if groups == 1:
        xc = _pad_channel_first(x, padding)
        gc = np.ascontiguousarray(np.moveaxis(g, 1, 0))  # [cout, N, *out]
        per_sample = cin * int(np.prod(kernel)) * int(np.prod(out_shape))
        gw = np.zeros((cout, cin * int(np.prod(kernel))), dtype=np.result_type(g, x))
        for i, j in _chunks(n, per_sample):
            cols = _columns(xc[:, i:j], kernel, dilation, stride, out_shape)
            gw += gc[:, i:j].reshape(cout, -1) @ cols.T
        gw = gw.reshape(w.shape)
        if not need_gx:
            return None, gw
        gflat = gc.reshape(cout, -1)
        gxc = np.zeros((cin, n) + tuple(xp_shape[2:]), dtype=np.result_type(g, w))
        for offs, sl in _offset_slices(kernel, dilation, stride, out_shape):
            # contiguous copy keeps matmul on the BLAS path
            wk = np.ascontiguousarray(w[(slice(None), slice(None)) + offs].T)  # [cin, cout]
            gxc[(slice(None), slice(None)) + sl] += (wk @ gflat).reshape((cin, n) + tuple(out_shape))
        if any(padding):
            gxc = gxc[(slice(None), slice(None)) + tuple(
                slice(p, p + s) for p, s in zip(padding, x.shape[2:]))]
        return np.ascontiguousarray(np.moveaxis(gxc, 0, 1)), gw

    xp = np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding]) if any(padding) else x
    win = _windows(xp, kernel, dilation, stride, out_shape)
    sp = tuple(range(2, 2 + nd))
    cg, og = cin // groups, cout // groups
    gg = g.reshape((n, groups, og) + out_shape)
    wv = win.reshape((n, groups, cg) + win.shape[2:])
    letters = "abcdef"[:nd]
    klet = "uvwxyz"[:nd]
    gw = np.einsum(f"ngo{letters},ngc{letters}{klet}->goc{klet}", gg, wv, optimize=True)
    gw = gw.reshape(w.shape)
    gxp = np.zeros(xp_shape, dtype=x.dtype)
    for offs, sl in _offset_slices(kernel, dilation, stride, out_shape):
        sl = (slice(None), slice(None)) + sl
        wkg = w[(slice(None), slice(None)) + offs].reshape(groups, og, cg)
        contrib = np.einsum(f"goc,ngo{letters}->ngc{letters}", wkg, gg, optimize=True)
        gxp[sl] += contrib.reshape((n, cin) + out_shape)
    if any(padding):
        crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(padding, x.shape[2:]))
        return gxp[crop], gw
    return gxp, gw


def conv_nd(x: Tensor, weight: Tensor, bias: Tensor | None, kernel, dilation=1, stride=1,
            padding=0, groups: int = 1) -> Tensor:
    """Batched dilated cross-correlation over ``len(kernel)`` trailing axes."""
    nd = len(kernel)
    kernel = _tuple(kernel, nd)
    dilation = _tuple(dilation, nd)
    stride = _tuple(stride, nd)
    padding = same_padding(kernel, dilation) if padding == "same" else _tuple(padding, nd)
    xd, wd = x.data, weight.data
    if xd.ndim != nd + 2:
        raise ValueError(f"conv: expected input with {nd + 2} dims [N, C, ...], got shape {xd.shape}")
    cin = xd.shape[1]
    if wd.shape[2:] != kernel or wd.shape[1] * groups != cin or wd.shape[0] % groups:
        raise ValueError(
            f"conv: weight shape {wd.shape} does not match input channels {cin}, "
            f"kernel {kernel}, groups {groups}")
    out_shape = conv_output_shape(xd.shape[2:], kernel, dilation, stride, padding)
    if min(out_shape) < 1:
        raise ValueError(
            f"conv: input extent {xd.shape[2:]} too small for kernel {kernel} with "
            f"dilation {dilation}, stride {stride}, padding {padding}")
    out, xp_shape, out_shape = _conv_forward(xd, wd, kernel, dilation, stride, padding, groups)
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ValueError(f"conv: bias shape {bias.shape} != ({wd.shape[0]},)")
        out += bias.data.reshape((1, -1) + (1,) * nd)
        parents.append(bias)

    def bw(g):
        gx, gw = _conv_backward(g, xd, wd, kernel, dilation, stride, padding, groups,
                                xp_shape, out_shape, need_gx=x.requires_grad)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + nd))))
        return tuple(grads)

    return _make(out, tuple(parents), bw, f"conv{nd}d")


def _batched(x: Tensor, nd: int) -> tuple[Tensor, bool]:
    if x.ndim == nd + 1:
        return x.reshape((1,) + x.shape), True
    return x, False


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, kernel=None,
           dilation=1, stride=1, padding="same", groups: int = 1) -> Tensor:
    """3-D dilated convolution on ``[C, T, H, W]`` or ``[N, C, T, H, W]``."""
    kernel = tuple(weight.shape[2:]) if kernel is None else _tuple(kernel, 3)
    xb, squeeze = _batched(x, 3)
    out = conv_nd(xb, weight, bias, kernel, dilation, stride, padding, groups)
    return out.reshape(out.shape[1:]) if squeeze else out


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, kernel=None,
           dilation=1, stride=1, padding="same", groups: int = 1) -> Tensor:
    """1-D dilated convolution on ``[C, T]`` or ``[N, C, T]``."""
    kernel = tuple(weight.shape[2:]) if kernel is None else _tuple(kernel, 1)
    xb, squeeze = _batched(x, 1)
    out = conv_nd(xb, weight, bias, kernel, dilation, stride, padding, groups)
    return out.reshape(out.shape[1:]) if squeeze else out


def pool_blocks(x: Tensor, kernel: Sequence[int], reduce: str = "max") -> Tensor:
    """Non-overlapping pooling over the trailing ``len(kernel)`` axes (stride == kernel)."""
    nd = len(kernel)
    lead = x.shape[: x.ndim - nd]
    dims = x.shape[x.ndim - nd:]
    for n, k in zip(dims, kernel):
        if n % k:
            raise ValueError(f"pool: extent {dims} not divisible by kernel {tuple(kernel)}")
    split = []
    for n, k in zip(dims, kernel):
        split += [n // k, k]
    y = x.reshape(tuple(lead) + tuple(split))
    axes = tuple(len(lead) + 2 * i + 1 for i in range(nd))
    return y.max(axis=axes) if reduce == "max" else y.mean(axis=axes)


def maxpool_spatial(x: Tensor, kernel, stride=None) -> Tensor:
    """Max pooling over H and W of ``[C, T, H, W]`` / ``[N, C, T, H, W]``; T untouched."""
    kernel = _tuple(kernel, 3)
    stride = kernel if stride is None else _tuple(stride, 3)
    if kernel[0] != 1 or stride != kernel:
        raise ValueError("maxpool_spatial: kernel must be [1, kH, kW] with stride == kernel")
    return pool_blocks(x, kernel[1:], "max")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ W^T + b`` for ``x`` of shape ``[..., N]`` and ``W`` of shape ``[M, N]``."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weights {weight.shape}")
    wt = weight.transpose((1, 0))
    out = x @ wt
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias
    return out
