"""Loss terms against brute-force oracles plus gradient checks."""

import numpy as np
import pytest

from panorec.diffops import fd_gradcheck
from panorec.losses import (PercExtractor, mse_loss, perc_loss, proj_loss,
                            total_loss)


def rand_pair(seed, shape=(6, 8, 10), lo=0.0, hi=255.0):
    rng = np.random.default_rng(seed)
    return (rng.uniform(lo, hi, size=shape), rng.uniform(lo, hi, size=shape))


# ---------------------------------------------------------------- mse

def test_mse_zero_on_equal():
    p, _ = rand_pair(0)
    assert mse_loss(p, p)[0] == 0.0


def test_mse_constant_difference():
    p, _ = rand_pair(1)
    val, _ = mse_loss(p + 2.0, p)
    assert abs(val - 4.0) <= 1e-12


def test_mse_triple_loop_oracle():
    p, g = rand_pair(2, shape=(4, 5, 6))
    acc = 0.0
    for i in range(4):
        for j in range(5):
            for k in range(6):
                acc += (p[i, j, k] - g[i, j, k]) ** 2
    val, _ = mse_loss(p, g)
    assert abs(val - acc / (4 * 5 * 6)) <= 1e-12


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        mse_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_mse_gradient():
    p, g = rand_pair(3, shape=(3, 4, 5))

    def grads(G):
        _, gp = mse_loss(p, g)
        return [float(G) * gp]

    worst = fd_gradcheck(lambda: np.array(mse_loss(p, g)[0]), grads, [p],
                         n_probes=60, seed=4)
    assert worst <= 1e-4


# ---------------------------------------------------------------- proj

def brute_proj(p, g):
    acc = 0.0
    for ax in (2, 1, 0):
        d = p.max(axis=ax) - g.max(axis=ax)
        acc += float((d * d).sum())
    return acc


def test_proj_zero_on_equal():
    p, _ = rand_pair(5)
    assert proj_loss(p, p)[0] == 0.0


def test_proj_ignores_dominated_voxels():
    rng = np.random.default_rng(6)
    g = rng.uniform(1.0, 2.0, size=(4, 4, 4))
    # dominate voxel (2,2,1) on its line in each of the three views
    g[2, 2, 3] = 3.0
    g[2, 0, 1] = 3.0
    g[0, 2, 1] = 3.0
    p = g.copy()
    p[2, 2, 1] = 0.5
    assert proj_loss(p, g)[0] == 0.0


def test_proj_brute_force_oracle():
    p, g = rand_pair(7, shape=(5, 6, 7))
    val, _ = proj_loss(p, g)
    assert abs(val - brute_proj(p, g)) <= 1e-9


def test_proj_gradient_support():
    p, g = rand_pair(8, shape=(4, 5, 6))
    _, gp = proj_loss(p, g)
    support = np.zeros_like(p, dtype=bool)
    for ax in (0, 1, 2):
        idx = p.argmax(axis=ax)
        np.put_along_axis(support, np.expand_dims(idx, ax), True, axis=ax)
    assert np.all(gp[~support] == 0.0)


def test_proj_gradient():
    # continuous random input: argmax ties have probability zero, so the
    # FD probe stays inside a linear region of the max
    p, g = rand_pair(9, shape=(4, 4, 5))

    def grads(G):
        _, gp = proj_loss(p, g)
        return [float(G) * gp]

    worst = fd_gradcheck(lambda: np.array(proj_loss(p, g)[0]), grads, [p],
                         n_probes=80, seed=10)
    assert worst <= 1e-4


# ---------------------------------------------------------------- perc

def test_perc_zero_on_equal():
    ext = PercExtractor()
    p, _ = rand_pair(11, shape=(16, 16, 16))
    assert perc_loss(p, p, ext)[0] == 0.0


def test_perc_symmetry():
    ext = PercExtractor()
    p, g = rand_pair(12, shape=(16, 16, 16))
    assert abs(perc_loss(p, g, ext)[0] - perc_loss(g, p, ext)[0]) <= 1e-9


def test_perc_direct_recomputation():
    ext = PercExtractor()
    p, g = rand_pair(13, shape=(16, 16, 16))
    want = 0.0
    for ax in (2, 1, 0):
        a2, a4 = ext.features(p.max(axis=ax), keep=False)
        b2, b4 = ext.features(g.max(axis=ax), keep=False)
        want += float(((a2 - b2) ** 2).sum() + ((a4 - b4) ** 2).sum())
    val, _ = perc_loss(p, g, ext)
    assert abs(val - want) <= max(1e-9, 1e-12 * want)


def test_perc_extractor_frozen():
    assert PercExtractor().params() == []


def test_perc_extractor_deterministic():
    a = PercExtractor(seed=0)
    b = PercExtractor(seed=0)
    img = np.random.default_rng(14).uniform(0, 255, size=(16, 16))
    fa = a.features(img, keep=False)
    fb = b.features(img, keep=False)
    np.testing.assert_array_equal(fa[0], fb[0])
    np.testing.assert_array_equal(fa[1], fb[1])


def test_perc_gradient():
    ext = PercExtractor()
    p, g = rand_pair(15, shape=(16, 16, 16))

    def grads(G):
        _, gp = perc_loss(p, g, ext)
        return [float(G) * gp]

    worst = fd_gradcheck(lambda: np.array(perc_loss(p, g, ext)[0]), grads,
                         [p], n_probes=80, seed=16)
    assert worst <= 1e-4


# ---------------------------------------------------------------- total

def test_total_reduces_to_mse():
    ext = PercExtractor()
    p, g = rand_pair(17, shape=(16, 16, 16))
    val, grad, parts = total_loss(p, g, ext, lam1=0.0, lam2=0.0)
    assert val == parts["mse"] == mse_loss(p, g)[0]
    np.testing.assert_array_equal(grad, mse_loss(p, g)[1])


def test_total_zero_on_equal():
    ext = PercExtractor()
    p, _ = rand_pair(18, shape=(16, 16, 16))
    val, _, _ = total_loss(p, p, ext, lam1=0.7, lam2=0.3)
    assert val == 0.0


def test_total_linear_in_projection_weight():
    ext = PercExtractor()
    p, g = rand_pair(19, shape=(16, 16, 16))
    v1, _, parts = total_loss(p, g, ext, lam1=1e-3)
    v2, _, _ = total_loss(p, g, ext, lam1=2e-3)
    slope = (v2 - v1) / 1e-3
    assert abs(slope - parts["proj"]) <= 1e-6 * max(1.0, parts["proj"])


def test_total_rejects_negative_weights():
    ext = PercExtractor()
    p, g = rand_pair(20, shape=(16, 16, 16))
    with pytest.raises(ValueError):
        total_loss(p, g, ext, lam1=-0.1)


def test_total_gradient():
    ext = PercExtractor()
    p, g = rand_pair(21, shape=(16, 16, 16))

    def grads(G):
        _, gp, _ = total_loss(p, g, ext)
        return [float(G) * gp]

    worst = fd_gradcheck(lambda: np.array(total_loss(p, g, ext)[0]), grads,
                         [p], n_probes=80, seed=22)
    assert worst <= 1e-4
