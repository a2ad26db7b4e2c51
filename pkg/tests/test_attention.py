"""Axial attention vs a dense loop oracle; gates; the MAC counter."""

import numpy as np
import pytest

from panorec.attention import (MHA1d, AxialAttention, AttentionGate,
                               count_axial_macs)
from panorec.diffops import fd_gradcheck
from panorec.ops import softmax_lastaxis


def dense_mha_oracle(x, op):
    """Per-head loops, no vectorization shortcuts."""
    L, C = x.shape
    q = x @ op.Wq.data.T
    k = x @ op.Wk.data.T
    v = x @ op.Wv.data.T
    out = np.zeros((L, C))
    for h in range(op.heads):
        sl = slice(h * op.dh, (h + 1) * op.dh)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        for i in range(L):
            scores = np.array([qh[i] @ kh[j] for j in range(L)]) / np.sqrt(op.dh)
            w = softmax_lastaxis(scores)
            out[i, sl] = sum(w[j] * vh[j] for j in range(L))
    return out @ op.Wo.data.T


def test_mha_matches_dense_oracle():
    rng = np.random.default_rng(0)
    op = MHA1d(8, heads=4, rng=rng)
    x = rng.standard_normal((6, 8))
    np.testing.assert_allclose(op.forward(x), dense_mha_oracle(x, op),
                               atol=1e-10)


def test_mha_single_key():
    rng = np.random.default_rng(1)
    op = MHA1d(6, heads=2, rng=rng)
    x = rng.standard_normal((1, 6))
    want = (x @ op.Wv.data.T) @ op.Wo.data.T
    np.testing.assert_allclose(op.forward(x), want, atol=1e-12)


def test_mha_constant_rows_stay_constant():
    rng = np.random.default_rng(2)
    op = MHA1d(8, heads=4, rng=rng)
    x = np.tile(rng.standard_normal((1, 8)), (5, 1))
    out = op.forward(x)
    np.testing.assert_allclose(out, np.tile(out[:1], (5, 1)), atol=1e-12)


def test_mha_weights_sum_to_one():
    rng = np.random.default_rng(3)
    op = MHA1d(8, heads=4, rng=rng)
    x = rng.standard_normal((7, 8)) * 10
    q = op._split(x @ op.Wq.data.T, ())
    k = op._split(x @ op.Wk.data.T, ())
    attn = softmax_lastaxis(q @ k.swapaxes(-1, -2) / np.sqrt(op.dh))
    np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-12)


def test_mha_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        MHA1d(6, heads=4)


def test_mha_gradient():
    rng = np.random.default_rng(4)
    op = MHA1d(6, heads=2, rng=rng)
    x = rng.standard_normal((5, 6))
    params = [p.data for p in op.params()]

    def grads(G):
        op.zero_grad()
        op.forward(x)
        gx = op.backward(G)
        return [gx] + [p.grad for p in op.params()]

    worst = fd_gradcheck(lambda: op.forward(x), grads, [x] + params,
                         n_probes=220, seed=5)
    assert worst <= 1e-4


def test_axial_1x1_degenerates():
    rng = np.random.default_rng(6)
    op = AxialAttention(8, heads=4, rng=rng)
    x = rng.standard_normal((8, 1, 1))
    xt = x.reshape(1, 1, 8)
    yw = op.mha_w.forward(op.norm_w.forward(xt))
    yh = op.mha_h.forward(op.norm_h.forward(xt))
    want = (xt + yw + yh).reshape(8, 1, 1)
    np.testing.assert_allclose(op.forward(x), want, atol=1e-12)


def test_axial_width_permutation_equivariance():
    rng = np.random.default_rng(7)
    op = AxialAttention(8, heads=4, rng=rng)
    x = rng.standard_normal((8, 5, 9))
    perm = rng.permutation(9)
    np.testing.assert_allclose(op.forward(x)[:, :, perm],
                               op.forward(x[:, :, perm]), atol=1e-12)


def test_axial_height_permutation_equivariance():
    rng = np.random.default_rng(8)
    op = AxialAttention(8, heads=4, rng=rng)
    x = rng.standard_normal((8, 6, 4))
    perm = rng.permutation(6)
    np.testing.assert_allclose(op.forward(x)[:, perm],
                               op.forward(x[:, perm]), atol=1e-12)


def test_axial_gradient():
    rng = np.random.default_rng(9)
    op = AxialAttention(4, heads=2, rng=rng)
    x = rng.standard_normal((4, 4, 8))
    params = [p.data for p in op.params()]

    def grads(G):
        op.zero_grad()
        op.forward(x)
        gx = op.backward(G)
        return [gx] + [p.grad for p in op.params()]

    worst = fd_gradcheck(lambda: op.forward(x), grads, [x] + params,
                         n_probes=260, seed=10)
    assert worst <= 1e-4


def test_mac_counter_doubling_rules():
    base = count_axial_macs(C=8, H=32, W=32)
    wide = count_axial_macs(C=8, H=32, W=64)
    assert wide["width_core"] == 4 * base["width_core"]
    assert wide["height_core"] == 2 * base["height_core"]


def test_mac_counter_loglog_slope():
    # totals against the published HWC(H+W) measure at square sizes
    sizes = [32, 64, 128]
    totals = [count_axial_macs(8, L, L)["total"] for L in sizes]
    measure = [L * L * 8 * (L + L) for L in sizes]
    slope = np.polyfit(np.log(measure), np.log(totals), 1)[0]
    assert abs(slope - 0.96) <= 0.096


def test_gate_saturation_high():
    rng = np.random.default_rng(10)
    gate = AttentionGate(3, 3, inter=4, rng=rng)
    gate.psi_b.data[:] = 50.0
    skip = rng.standard_normal((3, 6, 5))
    ctx = rng.standard_normal((3, 6, 5))
    np.testing.assert_allclose(gate.forward(skip, ctx), skip, atol=1e-9)


def test_gate_saturation_low():
    rng = np.random.default_rng(11)
    gate = AttentionGate(3, 3, inter=4, rng=rng)
    gate.psi_b.data[:] = -50.0
    skip = rng.standard_normal((3, 6, 5))
    ctx = rng.standard_normal((3, 6, 5))
    np.testing.assert_allclose(gate.forward(skip, ctx),
                               np.zeros_like(skip), atol=1e-9)


def test_gate_bounded_by_skip():
    rng = np.random.default_rng(12)
    gate = AttentionGate(4, 4, inter=4, rng=rng)
    skip = rng.standard_normal((4, 5, 7))
    ctx = rng.standard_normal((4, 5, 7))
    out = gate.forward(skip, ctx)
    assert np.all(np.abs(out) <= np.abs(skip) + 1e-15)


def test_gate_upsamples_context_3d():
    rng = np.random.default_rng(13)
    gate = AttentionGate(2, 3, inter=4, rng=rng)
    skip = rng.standard_normal((2, 4, 6, 8))
    ctx = rng.standard_normal((3, 2, 3, 4))
    out = gate.forward(skip, ctx)
    assert out.shape == skip.shape


def test_gate_rejects_nonaligned():
    gate = AttentionGate(2, 2, inter=3)
    with pytest.raises(ValueError):
        gate.forward(np.zeros((2, 5, 5)), np.zeros((2, 3, 5)))


@pytest.mark.parametrize("ctx_shape", [(3, 6, 4), (3, 3, 2)])
def test_gate_gradient(ctx_shape):
    rng = np.random.default_rng(14)
    gate = AttentionGate(3, 3, inter=5, rng=rng)
    skip = rng.standard_normal((3, 6, 4))
    ctx = rng.standard_normal(ctx_shape)
    params = [p.data for p in gate.params()]

    def fwd():
        return gate.forward(skip, ctx)

    def grads(G):
        gate.zero_grad()
        gate.forward(skip, ctx)
        gskip, gctx = gate.backward(G)
        return [gskip, gctx] + [p.grad for p in gate.params()]

    worst = fd_gradcheck(fwd, grads, [skip, ctx] + params,
                         n_probes=240, seed=15)
    assert worst <= 1e-4
