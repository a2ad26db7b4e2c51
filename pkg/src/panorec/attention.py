"""Axial multi-head self-attention on 2D maps and additive attention
gates for skip connections (2D and 3D).

AxialAttn(X) = X + MHA_w(LN_w(X)) + MHA_h(LN_h(X)): pre-norm per
axis, separate projection weights per axis (width and height carry
different statistics), outputs summed, residual around both. No
positional encoding, so both branches are permutation-equivariant
along their length axis. An analytic MAC counter backs the published
O(HWC(H+W)) complexity claim.
"""

from __future__ import annotations

import numpy as np

from .diffops import Op, Parameter
from .ops import LayerNorm, sigmoid, softmax_lastaxis, softmax_vjp

__all__ = ["MHA1d", "AxialAttention", "AttentionGate", "count_axial_macs"]


class MHA1d(Op):
    """Scaled dot-product self-attention along the length axis of
    [..., L, C] with bias-free Q/K/V/O projections of [C, C]."""

    def __init__(self, dim: int, heads: int, rng=None, name: str = "mha"):
        super().__init__()
        if dim % heads:
            raise ValueError("C must be divisible by heads")
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.heads = heads
        self.dh = dim // heads
        s = 1.0 / np.sqrt(dim)
        def w(tag):
            return Parameter(rng.uniform(-s, s, size=(dim, dim)),
                             f"{name}.{tag}")
        self.Wq, self.Wk, self.Wv, self.Wo = w("Wq"), w("Wk"), w("Wv"), w("Wo")

    def _split(self, y, lead):
        # [..., L, C] -> [..., h, L, dh]
        return y.reshape(lead + (-1, self.heads, self.dh)).swapaxes(-2, -3)

    def _merge(self, y, lead):
        return y.swapaxes(-2, -3).reshape(lead + (-1, self.dim))

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ValueError(f"last axis {x.shape[-1]} != {self.dim}")
        lead = x.shape[:-2]
        q = self._split(x @ self.Wq.data.T, lead)
        k = self._split(x @ self.Wk.data.T, lead)
        v = self._split(x @ self.Wv.data.T, lead)
        # float() keeps the np.float64 scale scalar from widening f32 maps
        scores = q @ k.swapaxes(-1, -2) / float(np.sqrt(self.dh))
        attn = softmax_lastaxis(scores)
        ctx = self._merge(attn @ v, lead)
        self.save(x, q, k, v, attn, ctx, lead)
        return ctx @ self.Wo.data.T

    def backward(self, gy):
        x, q, k, v, attn, ctx, lead = self.saved()
        x2 = x.reshape(-1, self.dim)
        self.Wo.grad += gy.reshape(-1, self.dim).T @ ctx.reshape(-1, self.dim)
        gctx = self._split(gy @ self.Wo.data, lead)
        gattn = gctx @ v.swapaxes(-1, -2)
        gv = attn.swapaxes(-1, -2) @ gctx
        gscores = softmax_vjp(attn, gattn) / float(np.sqrt(self.dh))
        gq = gscores @ k
        gk = gscores.swapaxes(-1, -2) @ q
        gq = self._merge(gq, lead)
        gk = self._merge(gk, lead)
        gv = self._merge(gv, lead)
        for W, g in ((self.Wq, gq), (self.Wk, gk), (self.Wv, gv)):
            W.grad += g.reshape(-1, self.dim).T @ x2
        return gq @ self.Wq.data + gk @ self.Wk.data + gv @ self.Wv.data


class AxialAttention(Op):
    """X + MHA_w(LN_w(X)) + MHA_h(LN_h(X)) on [C, H, W] maps."""

    def __init__(self, dim: int, heads: int = 4, rng=None,
                 name: str = "axial"):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.norm_w = LayerNorm(dim)
        self.norm_h = LayerNorm(dim)
        self.mha_w = MHA1d(dim, heads, rng=rng, name=f"{name}.w")
        self.mha_h = MHA1d(dim, heads, rng=rng, name=f"{name}.h")

    def forward(self, x):
        if x.ndim != 3 or x.shape[0] != self.dim:
            raise ValueError(f"expected [{self.dim},H,W], got {x.shape}")
        xc = np.ascontiguousarray(x.transpose(1, 2, 0))      # [H, W, C]
        yw = self.mha_w.forward(self.norm_w.forward(xc))
        xh = np.ascontiguousarray(xc.swapaxes(0, 1))          # [W, H, C]
        yh = self.mha_h.forward(self.norm_h.forward(xh))
        out = xc + yw + yh.swapaxes(0, 1)
        return np.ascontiguousarray(out.transpose(2, 0, 1))

    def backward(self, gy):
        g = np.ascontiguousarray(gy.transpose(1, 2, 0))
        gxc = g.copy()
        gxc += self.norm_w.backward(self.mha_w.backward(g))
        gh = self.norm_h.backward(
            self.mha_h.backward(np.ascontiguousarray(g.swapaxes(0, 1))))
        gxc += gh.swapaxes(0, 1)
        return np.ascontiguousarray(gxc.transpose(2, 0, 1))


def count_axial_macs(C: int, H: int, W: int, heads: int = 4) -> dict:
    """Analytic multiply-accumulate census for one axial pass.

    'core' counts are the attention quadratic terms only (QK^T plus
    attn@V), which is what the published O(HWC(H+W)) bound tracks;
    projections are the 4 per-token [C,C] matmuls of each branch.
    """
    width_core = H * 2 * W * W * C
    height_core = W * 2 * H * H * C
    width_proj = H * W * 4 * C * C
    height_proj = H * W * 4 * C * C
    return {
        "width_core": width_core,
        "height_core": height_core,
        "width_proj": width_proj,
        "height_proj": height_proj,
        "total": width_core + height_core + width_proj + height_proj,
    }


def _nn_upsample(x, factors):
    for ax, f in enumerate(factors, start=1):
        if f > 1:
            x = np.repeat(x, f, axis=ax)
    return x


def _sum_downsample(g, factors):
    # adjoint of nearest-neighbor repeat
    for ax, f in enumerate(factors, start=1):
        if f > 1:
            shape = g.shape[:ax] + (g.shape[ax] // f, f) + g.shape[ax + 1:]
            g = g.reshape(shape).sum(axis=ax + 1)
    return g


class AttentionGate(Op):
    """gate = sigmoid(psi(ReLU(W_s skip + W_c ctx))); out = gate * skip.

    Works on [C, *spatial] for 2D and 3D alike; a coarser context is
    nearest-neighbor upsampled to the skip's spatial extents first.
    """

    def __init__(self, skip_ch: int, ctx_ch: int, inter: int,
                 rng=None, name: str = "gate"):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.skip_ch, self.ctx_ch, self.inter = skip_ch, ctx_ch, inter
        ss, sc = 1.0 / np.sqrt(skip_ch), 1.0 / np.sqrt(ctx_ch)
        self.W_s = Parameter(rng.uniform(-ss, ss, (inter, skip_ch)),
                             f"{name}.W_s")
        self.W_c = Parameter(rng.uniform(-sc, sc, (inter, ctx_ch)),
                             f"{name}.W_c")
        self.b = Parameter(np.zeros(inter), f"{name}.b")
        si = 1.0 / np.sqrt(inter)
        self.psi = Parameter(rng.uniform(-si, si, (inter,)), f"{name}.psi")
        self.psi_b = Parameter(np.zeros(1), f"{name}.psi_b")

    def forward(self, skip, ctx):
        if skip.shape[0] != self.skip_ch or ctx.shape[0] != self.ctx_ch:
            raise ValueError("channel mismatch")
        factors = tuple(s // c for s, c in zip(skip.shape[1:], ctx.shape[1:]))
        if any(s != c * f for s, c, f in
               zip(skip.shape[1:], ctx.shape[1:], factors)):
            raise ValueError("context extents must divide skip extents")
        nd = skip.ndim - 1
        bshape = (self.inter,) + (1,) * nd
        # W_c commutes with the constant-block upsample, so the context
        # branch runs at its own (coarse) resolution
        ctx_low = np.tensordot(self.W_c.data.astype(skip.dtype, copy=False),
                               ctx, axes=([1], [0]))
        pre = (np.tensordot(self.W_s.data.astype(skip.dtype, copy=False),
                            skip, axes=([1], [0]))
               + _nn_upsample(ctx_low, factors)
               + self.b.data.astype(skip.dtype).reshape(bshape))
        relu_mask = pre > 0
        r = np.where(relu_mask, pre, 0.0)
        z = np.tensordot(self.psi.data.astype(skip.dtype, copy=False), r,
                         axes=([0], [0])) + self.psi_b.data.astype(skip.dtype)
        gate = sigmoid(z)  # [*spatial]
        self.save(skip, ctx, factors, relu_mask, r, gate)
        return gate[None] * skip

    def backward(self, gy):
        skip, ctx, factors, relu_mask, r, gate = self.saved()
        sp = tuple(range(1, gy.ndim))
        ggate = (gy * skip).sum(axis=0)
        gskip = gy * gate[None]
        gz = ggate * gate * (1.0 - gate)
        self.psi_b.grad += gz.sum()
        self.psi.grad += (gz[None] * r).sum(axis=sp)
        gr = self.psi.data.astype(gy.dtype).reshape(
            (self.inter,) + (1,) * (gy.ndim - 1)) * gz[None]
        gpre = np.where(relu_mask, gr, 0.0)
        self.b.grad += gpre.sum(axis=sp)
        self.W_s.grad += np.tensordot(gpre, skip, axes=(sp, sp))
        gskip += np.tensordot(self.W_s.data.astype(gy.dtype, copy=False).T,
                              gpre, axes=([1], [0]))
        # adjoint of the coarse context branch: pool the preactivation
        # gradient over each block first, then apply W_c pieces there
        gpre_ds = _sum_downsample(gpre, factors)
        self.W_c.grad += np.tensordot(gpre_ds, ctx, axes=(sp, sp))
        gctx = np.tensordot(self.W_c.data.astype(gy.dtype, copy=False).T,
                            gpre_ds, axes=([1], [0]))
        return gskip, gctx
