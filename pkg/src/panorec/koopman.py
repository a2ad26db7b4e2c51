"""Koopman token block: strictly contractive per-channel complex
spectrum, bounded content-adaptive gate, real realization, projection,
residual, and normalization.

Per token: m = log1p|phi|; g_r = 1 + rho*tanh(A_r m + b_r), g_i =
rho*tanh(A_i m + b_i); alpha = lambda * g where lambda_d =
exp(-softplus(nu_d)) * e^{i theta_d}; u = Re(alpha) o phi, v =
Im(alpha) o phi; phi+ = LayerNorm(phi + W [u; v]). The spectrum stays
inside the unit disk for any finite nu, and rho bounds the gate's
deviation from 1 + 0i.
"""

from __future__ import annotations

import numpy as np

from .diffops import Op, Parameter
from .ops import LayerNorm, sigmoid, softplus

__all__ = ["damped_magnitude", "KoopmanBlock", "spectrum_csv"]


def damped_magnitude(phi):
    return np.log1p(np.abs(phi))


class KoopmanBlock(Op):
    """One contractive spectral step on token matrices [T, D]."""

    def __init__(self, dim: int, rho: float = 0.1, n_steps: int = 1,
                 rng=None, name: str = "koop"):
        super().__init__()
        if not 0.0 <= rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.rho = rho
        self.n_steps = n_steps
        self.nu = Parameter(np.full(dim, 0.5), f"{name}.nu")
        self.theta = Parameter(rng.uniform(-np.pi / 8, np.pi / 8, dim),
                               f"{name}.theta")
        self.A_r = Parameter(np.zeros((dim, dim)), f"{name}.A_r")
        self.A_i = Parameter(np.zeros((dim, dim)), f"{name}.A_i")
        self.b_r = Parameter(np.zeros(dim), f"{name}.b_r")
        self.b_i = Parameter(np.zeros(dim), f"{name}.b_i")
        s = 0.1 / np.sqrt(2 * dim)
        self.W = Parameter(rng.uniform(-s, s, size=(dim, 2 * dim)),
                           f"{name}.W")
        self.norm = LayerNorm(dim)

    def lambda_parts(self):
        # softplus underflows to exact 0 for nu << 0; floor keeps |lambda|
        # strictly inside the unit disk for any finite nu
        damp = np.maximum(softplus(self.nu.data), 1e-12)
        mag = np.exp(-damp)
        return mag * np.cos(self.theta.data), mag * np.sin(self.theta.data), mag

    def multiplier(self, m):
        """alpha(m) for token magnitudes m: returns (alpha_r, alpha_i)."""
        lr, li, _ = self.lambda_parts()
        tr = np.tanh(m @ self.A_r.data.T + self.b_r.data)
        ti = np.tanh(m @ self.A_i.data.T + self.b_i.data)
        gr = 1.0 + self.rho * tr
        gi = self.rho * ti
        return lr * gr - li * gi, lr * gi + li * gr

    def _step(self, phi):
        lr, li, mag = self.lambda_parts()
        m = damped_magnitude(phi)
        tr = np.tanh(m @ self.A_r.data.T + self.b_r.data)
        ti = np.tanh(m @ self.A_i.data.T + self.b_i.data)
        gr = 1.0 + self.rho * tr
        gi = self.rho * ti
        ar = lr * gr - li * gi
        ai = lr * gi + li * gr
        u = ar * phi
        v = ai * phi
        P = np.concatenate([u, v], axis=-1)
        pre = phi + P @ self.W.data.T
        out = self.norm.forward(pre)
        self.save(phi, m, tr, ti, gr, gi, ar, ai, lr, li, mag, P)
        return out

    def _step_back(self, gy):
        phi, m, tr, ti, gr, gi, ar, ai, lr, li, mag, P = self.saved()
        gpre = self.norm.backward(gy)
        gphi = gpre.copy()
        g2 = gpre.reshape(-1, self.dim)
        self.W.grad += g2.T @ P.reshape(-1, 2 * self.dim)
        gP = gpre @ self.W.data
        gu, gv = gP[..., :self.dim], gP[..., self.dim:]
        gar = gu * phi
        gai = gv * phi
        gphi += gu * ar + gv * ai
        red = tuple(range(gar.ndim - 1))
        glr = (gar * gr + gai * gi).sum(axis=red)
        gli = (gai * gr - gar * gi).sum(axis=red)
        ggr = gar * lr + gai * li
        ggi = gai * lr - gar * li
        gzr = ggr * self.rho * (1.0 - tr * tr)
        gzi = ggi * self.rho * (1.0 - ti * ti)
        z2r = gzr.reshape(-1, self.dim)
        z2i = gzi.reshape(-1, self.dim)
        m2 = m.reshape(-1, self.dim)
        self.A_r.grad += z2r.T @ m2
        self.A_i.grad += z2i.T @ m2
        self.b_r.grad += z2r.sum(axis=0)
        self.b_i.grad += z2i.sum(axis=0)
        gm = gzr @ self.A_r.data + gzi @ self.A_i.data
        gphi += gm * np.sign(phi) / (1.0 + np.abs(phi))
        # lambda = mag * (cos, sin)(theta); mag = exp(-softplus(nu))
        cos_t, sin_t = np.cos(self.theta.data), np.sin(self.theta.data)
        gmag = glr * cos_t + gli * sin_t
        self.theta.grad += mag * (gli * cos_t - glr * sin_t)
        self.nu.grad += -gmag * mag * sigmoid(self.nu.data)
        return gphi

    def forward(self, phi):
        if phi.shape[-1] != self.dim:
            raise ValueError(f"last axis {phi.shape[-1]} != {self.dim}")
        for _ in range(self.n_steps):
            phi = self._step(phi)
        return phi

    def backward(self, gy):
        for _ in range(self.n_steps):
            gy = self._step_back(gy)
        return gy


def spectrum_csv(block: KoopmanBlock) -> str:
    """Diagnostic dump: channel, |lambda|, theta."""
    _, _, mag = block.lambda_parts()
    lines = ["channel,|lambda|,theta"]
    for d in range(block.dim):
        lines.append(f"{d},{mag[d]:.10g},{block.theta.data[d]:.10g}")
    return "\n".join(lines) + "\n"
