"""Convolution kernels for 2D maps [C,H,W] and 3D fields [C,A,B,D].

Forward/backward arithmetic is delegated to torch's CPU conv kernels
(used as raw array routines, no autograd); the VJP composition here is
our own and is finite-difference checked like every other op. The 3D
convs are decomposed into batched 2D convs over the leading spatial
axis, which sidesteps a pathologically slow oneDNN path for small
channel counts, and the stride-1 input gradient is computed as a
flipped-kernel convolution for the same reason.

Only the shapes the model needs are supported: kernel 3, padding 1,
stride 1 or 2; pointwise (1x1) and 2x-upsampling transposed convs are
separate ops built on plain tensordot.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as tF
from torch.nn.grad import conv2d_weight, conv3d_weight

from .diffops import Op, Parameter

__all__ = ["Conv2d", "Conv3d", "Conv1x1", "ConvUp2x",
           "DepthwiseConv2d", "DepthwiseConv3d"]


def _t(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a))


def _fan_in_init(rng, shape):
    fan = int(np.prod(shape[1:]))
    s = 1.0 / np.sqrt(fan)
    return rng.uniform(-s, s, size=shape)


class Conv2d(Op):
    """3x3, padding 1, stride 1 or 2, on [C,H,W]."""

    def __init__(self, cin: int, cout: int, stride: int = 1,
                 bias: bool = True, rng=None, name: str = "conv2d"):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.stride = cin, cout, stride
        self.weight = Parameter(_fan_in_init(rng, (cout, cin, 3, 3)),
                                f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias") if bias else None

    def forward(self, x):
        if x.ndim != 3 or x.shape[0] != self.cin:
            raise ValueError(f"expected [{self.cin},H,W], got {x.shape}")
        self.save(x)
        w = self.weight.data.astype(x.dtype, copy=False)
        y = tF.conv2d(_t(x)[None], _t(w), stride=self.stride, padding=1)[0]
        y = y.numpy()
        if self.bias is not None:
            y += self.bias.data.astype(x.dtype)[:, None, None]
        return y

    def backward(self, gy):
        (x,) = self.saved()
        w = self.weight.data.astype(x.dtype, copy=False)
        gyt = _t(gy)[None]
        xt = _t(x)[None]
        if self.bias is not None:
            self.bias.grad += gy.sum(axis=(1, 2))
        self.weight.grad += conv2d_weight(
            xt, self.weight.data.shape, gyt,
            stride=self.stride, padding=1).numpy()
        if self.stride == 1:
            wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].swapaxes(0, 1))
            gx = tF.conv2d(gyt, _t(wf), padding=1)[0]
        else:
            opad = tuple(x.shape[i + 1] - ((gy.shape[i + 1] - 1) * 2 + 1)
                         for i in range(2))
            gx = tF.conv_transpose2d(gyt, _t(w), stride=2, padding=1,
                                     output_padding=opad)[0]
        return gx.numpy()


def _slab_pack(x: np.ndarray) -> torch.Tensor:
    # [C,A,B,D] -> torch [A+2, C, B, D] with zero A-padding
    xt = _t(x).permute(1, 0, 2, 3)
    return tF.pad(xt, (0, 0, 0, 0, 0, 0, 1, 1))


def _out_extent(n: int, s: int) -> int:
    return (n + 2 - 3) // s + 1


class Conv3d(Op):
    """3x3x3, padding 1, stride 1 or 2, on [C,A,B,D]."""

    def __init__(self, cin: int, cout: int, stride: int = 1,
                 bias: bool = True, rng=None, name: str = "conv3d"):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.stride = cin, cout, stride
        self.weight = Parameter(_fan_in_init(rng, (cout, cin, 3, 3, 3)),
                                f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias") if bias else None

    def _conv_slabs(self, x, w, stride):
        # correlate [C,A,B,D] with [O,C,3,3,3]; A handled by slab sum
        xp = _slab_pack(x)
        outA = _out_extent(x.shape[1], stride)
        wt = _t(w)
        acc = None
        for dz in range(3):
            sl = xp[dz:dz + stride * (outA - 1) + 1:stride]
            y = tF.conv2d(sl, wt[:, :, dz], stride=stride, padding=1)
            acc = y if acc is None else acc.add_(y)
        return acc.permute(1, 0, 2, 3).numpy()  # [O, outA, B', D']

    def forward(self, x):
        if x.ndim != 4 or x.shape[0] != self.cin:
            raise ValueError(f"expected [{self.cin},A,B,D], got {x.shape}")
        self.save(x)
        w = self.weight.data.astype(x.dtype, copy=False)
        y = self._conv_slabs(x, w, self.stride)
        if self.bias is not None:
            y += self.bias.data.astype(x.dtype)[:, None, None, None]
        return y

    def backward(self, gy):
        (x,) = self.saved()
        w = self.weight.data.astype(x.dtype, copy=False)
        if self.bias is not None:
            self.bias.grad += gy.sum(axis=(1, 2, 3))

        # weight grad, slab by slab (conv2d_weight reduces over batch=A)
        xp = _slab_pack(x)
        outA = _out_extent(x.shape[1], self.stride)
        go = _t(gy).permute(1, 0, 2, 3)  # [outA, O, B', D']
        gw = np.empty_like(self.weight.data)
        for dz in range(3):
            sl = xp[dz:dz + self.stride * (outA - 1) + 1:self.stride]
            gw[:, :, dz] = conv2d_weight(
                sl, (self.cout, self.cin, 3, 3), go,
                stride=self.stride, padding=1).numpy()
        self.weight.grad += gw

        if self.stride == 1:
            wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].swapaxes(0, 1))
            return self._conv_slabs(gy, wf, 1)
        opad = tuple(x.shape[i + 1] - ((gy.shape[i + 1] - 1) * 2 + 1)
                     for i in range(3))
        gx = tF.conv_transpose3d(_t(gy)[None], _t(w), stride=2, padding=1,
                                 output_padding=opad)[0]
        return gx.numpy()


class Conv1x1(Op):
    """Pointwise channel mix on [C, *spatial], any rank."""

    def __init__(self, cin: int, cout: int, bias: bool = True,
                 rng=None, name: str = "conv1x1"):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout = cin, cout
        self.weight = Parameter(_fan_in_init(rng, (cout, cin)),
                                f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias") if bias else None

    def forward(self, x):
        if x.shape[0] != self.cin:
            raise ValueError("channel mismatch")
        self.save(x)
        w = self.weight.data.astype(x.dtype, copy=False)
        y = np.tensordot(w, x, axes=([1], [0]))
        if self.bias is not None:
            y += self.bias.data.astype(x.dtype).reshape(
                (self.cout,) + (1,) * (x.ndim - 1))
        return y

    def backward(self, gy):
        (x,) = self.saved()
        spatial = tuple(range(1, gy.ndim))
        if self.bias is not None:
            self.bias.grad += gy.sum(axis=spatial)
        self.weight.grad += np.tensordot(gy, x, axes=(spatial, spatial))
        w = self.weight.data.astype(x.dtype, copy=False)
        return np.tensordot(w.T, gy, axes=([1], [0]))


class ConvUp2x(Op):
    """Transposed conv, kernel 2, stride 2 (non-overlapping upsample).

    Works on [C,H,W] or [C,A,B,D]; weight is [cin, cout, 2, ...].
    """

    def __init__(self, cin: int, cout: int, ndim: int, bias: bool = True,
                 rng=None, name: str = "up2x"):
        super().__init__()
        if ndim not in (2, 3):
            raise ValueError("ndim must be 2 or 3")
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout, self.ndim = cin, cout, ndim
        shape = (cin, cout) + (2,) * ndim
        fan = cin  # each output position sees exactly one input voxel
        s = 1.0 / np.sqrt(fan)
        self.weight = Parameter(rng.uniform(-s, s, size=shape), f"{name}.weight")
        self.bias = Parameter(np.zeros(cout), f"{name}.bias") if bias else None

    def forward(self, x):
        if x.ndim != self.ndim + 1 or x.shape[0] != self.cin:
            raise ValueError("bad input shape")
        self.save(x)
        w = self.weight.data.astype(x.dtype, copy=False)
        # t[o, k1..kd, s1..sd] then interleave kernel into spatial
        t = np.tensordot(w, x, axes=([0], [0]))
        nd = self.ndim
        # current order: (o, k1..kn, a1..an) -> (o, a1,k1, a2,k2, ...)
        perm = [0] + [1 + nd + i if j == 0 else 1 + i
                      for i in range(nd) for j in (0, 1)]
        t = t.transpose(perm)
        shape = (self.cout,) + tuple(2 * s for s in x.shape[1:])
        y = np.ascontiguousarray(t).reshape(shape)
        if self.bias is not None:
            y += self.bias.data.astype(x.dtype).reshape(
                (self.cout,) + (1,) * nd)
        return y

    def _split(self, g):
        # [O, 2a1, 2a2, ...] -> [O, k1..kn, a1..an]
        nd = self.ndim
        shape = (g.shape[0],)
        for s in g.shape[1:]:
            shape += (s // 2, 2)
        t = g.reshape(shape)
        perm = [0] + [2 + 2 * i for i in range(nd)] + [1 + 2 * i for i in range(nd)]
        return t.transpose(perm)

    def backward(self, gy):
        (x,) = self.saved()
        nd = self.ndim
        if self.bias is not None:
            self.bias.grad += gy.sum(axis=tuple(range(1, gy.ndim)))
        gs = self._split(gy)  # [O, k.., a..]
        sp_x = tuple(range(1, nd + 1))
        sp_g = tuple(range(1 + nd, 1 + 2 * nd))
        # gw[i,o,k..] = sum_a x[i,a..] gs[o,k..,a..]
        gw = np.tensordot(x, gs, axes=(sp_x, sp_g))
        self.weight.grad += gw
        w = self.weight.data.astype(x.dtype, copy=False)
        # gx[i,a..] = sum_{o,k..} w[i,o,k..] gs[o,k..,a..]
        ax_w = (1,) + tuple(range(2, 2 + nd))
        ax_g = (0,) + tuple(range(1, 1 + nd))
        return np.tensordot(w, gs, axes=(ax_w, ax_g))


class _DepthwiseBase(Op):
    """Per-channel 3^d conv (groups = channels), padding 1, stride 1."""

    ndim = None

    def __init__(self, channels: int, rng=None, name: str = "dw"):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        kshape = (channels, 1) + (3,) * self.ndim
        self.weight = Parameter(_fan_in_init(rng, kshape), f"{name}.weight")
        self.bias = Parameter(np.zeros(channels), f"{name}.bias")

    def _conv(self, a, w):
        fn = tF.conv2d if self.ndim == 2 else tF.conv3d
        return fn(_t(a)[None], _t(w), padding=1, groups=self.channels)[0].numpy()

    def forward(self, x):
        if x.ndim != self.ndim + 1 or x.shape[0] != self.channels:
            raise ValueError("bad input shape")
        self.save(x)
        w = self.weight.data.astype(x.dtype, copy=False)
        y = self._conv(x, w)
        y += self.bias.data.astype(x.dtype).reshape(
            (self.channels,) + (1,) * self.ndim)
        return y

    def backward(self, gy):
        (x,) = self.saved()
        w = self.weight.data.astype(x.dtype, copy=False)
        self.bias.grad += gy.sum(axis=tuple(range(1, gy.ndim)))
        grad_w_fn = conv2d_weight if self.ndim == 2 else conv3d_weight
        self.weight.grad += grad_w_fn(
            _t(x)[None], self.weight.data.shape, _t(gy)[None],
            padding=1, groups=self.channels).numpy()
        flip = (slice(None), slice(None)) + (slice(None, None, -1),) * self.ndim
        wf = np.ascontiguousarray(w[flip])
        return self._conv(gy, wf)


class DepthwiseConv2d(_DepthwiseBase):
    ndim = 2


class DepthwiseConv3d(_DepthwiseBase):
    ndim = 3
