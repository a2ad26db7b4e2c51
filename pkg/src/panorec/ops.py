"""Dense kernels: activations, normalization layers, linear maps.

Every op follows the contract in diffops: forward caches, backward is
the exact VJP, parameter grads accumulate. Stable formulations for the
exponential family (softplus must survive x=1000).
"""

from __future__ import annotations

import numpy as np

from .diffops import Op, Parameter

__all__ = [
    "sigmoid", "softplus", "softmax_lastaxis", "softmax_vjp",
    "Sigmoid", "Tanh", "Softplus", "SiLU", "ReLU",
    "LayerNorm", "InstanceNorm", "GroupNorm", "Linear",
]


# functional forms, used by non-learned code paths as well

def sigmoid(x):
    """Logistic; exp overflow lands on the exact limit (1/inf -> 0),
    so the warning is suppressed rather than branched around (the
    two-sided masked version costs 20x on large f32 maps)."""
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def softplus(x):
    """log(1+exp(x)) without overflow: max(x,0) + log1p(exp(-|x|))."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softmax_lastaxis(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(s, gy):
    """VJP of softmax_lastaxis given its output s."""
    dot = (gy * s).sum(axis=-1, keepdims=True)
    return s * (gy - dot)


class Sigmoid(Op):
    def forward(self, x):
        s = sigmoid(x)
        self.save(s)
        return s

    def backward(self, gy):
        (s,) = self.saved()
        return gy * s * (1.0 - s)


class Tanh(Op):
    def forward(self, x):
        t = np.tanh(x)
        self.save(t)
        return t

    def backward(self, gy):
        (t,) = self.saved()
        return gy * (1.0 - t * t)


class Softplus(Op):
    def forward(self, x):
        self.save(x)
        return softplus(x)

    def backward(self, gy):
        (x,) = self.saved()
        return gy * sigmoid(x)


class SiLU(Op):
    """x * sigmoid(x); the swish used throughout the 3D stage."""

    def forward(self, x):
        s = sigmoid(x)
        self.save(x, s)
        return x * s

    def backward(self, gy):
        x, s = self.saved()
        return gy * s * (1.0 + x * (1.0 - s))


class ReLU(Op):
    def forward(self, x):
        mask = x > 0
        self.save(mask)
        return np.where(mask, x, 0.0)

    def backward(self, gy):
        (mask,) = self.saved()
        return np.where(mask, gy, 0.0)


def _norm_forward(x, axes, eps):
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat, inv


def _norm_backward(gh, xhat, inv, axes):
    # gh is the gradient w.r.t. xhat (affine already peeled off)
    m1 = gh.mean(axis=axes, keepdims=True)
    m2 = (gh * xhat).mean(axis=axes, keepdims=True)
    return (gh - m1 - xhat * m2) * inv


class LayerNorm(Op):
    """Normalize over the last axis, then affine. eps default 1e-5."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        if dim < 1:
            raise ValueError("layer_norm needs a non-empty last axis")
        self.dim = dim
        self.eps = eps
        self.gamma = Parameter(np.ones(dim), "ln.gamma")
        self.beta = Parameter(np.zeros(dim), "ln.beta")

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ValueError(f"last axis {x.shape[-1]} != {self.dim}")
        xhat, inv = _norm_forward(x, -1, self.eps)
        self.save(xhat, inv)
        return self.gamma.data * xhat + self.beta.data

    def backward(self, gy):
        xhat, inv = self.saved()
        red = tuple(range(gy.ndim - 1))
        self.gamma.grad += (gy * xhat).sum(axis=red)
        self.beta.grad += gy.sum(axis=red)
        return _norm_backward(self.gamma.data * gy, xhat, inv, -1)


class InstanceNorm(Op):
    """Per-channel normalization over all spatial axes of [C, *spatial].

    Works for 2D and 3D feature maps alike; batch handling is the
    caller's problem (the pipeline runs one sample at a time).
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.gamma = Parameter(np.ones(channels), "in.gamma")
        self.beta = Parameter(np.zeros(channels), "in.beta")

    def _shaped(self, nd):
        # gamma broadcast over trailing spatial axes
        return (self.channels,) + (1,) * (nd - 1)

    def forward(self, x):
        if x.shape[0] != self.channels:
            raise ValueError("channel mismatch")
        axes = tuple(range(1, x.ndim))
        xhat, inv = _norm_forward(x, axes, self.eps)
        self.save(xhat, inv, axes)
        shp = self._shaped(x.ndim)
        return self.gamma.data.reshape(shp) * xhat + self.beta.data.reshape(shp)

    def backward(self, gy):
        xhat, inv, axes = self.saved()
        self.gamma.grad += (gy * xhat).sum(axis=axes)
        self.beta.grad += gy.sum(axis=axes)
        gh = self.gamma.data.reshape(self._shaped(gy.ndim)) * gy
        return _norm_backward(gh, xhat, inv, axes)


class GroupNorm(Op):
    """Normalize [C, *spatial] over channel groups, affine per channel."""

    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        if channels % groups:
            raise ValueError("channels must divide into groups")
        self.groups = groups
        self.channels = channels
        self.eps = eps
        self.gamma = Parameter(np.ones(channels), "gn.gamma")
        self.beta = Parameter(np.zeros(channels), "gn.beta")

    def forward(self, x):
        if x.shape[0] != self.channels:
            raise ValueError("channel mismatch")
        spatial = x.shape[1:]
        xg = x.reshape(self.groups, -1)
        xhat, inv = _norm_forward(xg, 1, self.eps)
        self.save(xhat, inv, x.shape)
        shp = (self.channels,) + (1,) * len(spatial)
        xh = xhat.reshape(x.shape)
        return self.gamma.data.reshape(shp) * xh + self.beta.data.reshape(shp)

    def backward(self, gy):
        xhat, inv, xshape = self.saved()
        spatial_axes = tuple(range(1, len(xshape)))
        xh_full = xhat.reshape(xshape)
        self.gamma.grad += (gy * xh_full).sum(axis=spatial_axes)
        self.beta.grad += gy.sum(axis=spatial_axes)
        shp = (xshape[0],) + (1,) * (len(xshape) - 1)
        gh = (self.gamma.data.reshape(shp) * gy).reshape(self.groups, -1)
        gx = _norm_backward(gh, xhat, inv, 1)
        return gx.reshape(xshape)


class Linear(Op):
    """out = x @ W.T + b over the last axis; W is [out_dim, in_dim]."""

    def __init__(self, in_dim: int, out_dim: int, bias: bool = True,
                 rng=None, scale: float | None = None, name: str = "linear"):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        rng = rng or np.random.default_rng(0)
        s = scale if scale is not None else 1.0 / np.sqrt(in_dim)
        self.weight = Parameter(
            rng.uniform(-s, s, size=(out_dim, in_dim)), f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim), f"{name}.bias") if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"last axis {x.shape[-1]} != {self.in_dim}")
        self.save(x)
        y = x @ self.weight.data.T
        if self.bias is not None:
            y = y + self.bias.data
        return y

    def backward(self, gy):
        (x,) = self.saved()
        gy2 = gy.reshape(-1, self.out_dim)
        x2 = x.reshape(-1, self.in_dim)
        self.weight.grad += gy2.T @ x2
        if self.bias is not None:
            self.bias.grad += gy2.sum(axis=0)
        return gy @ self.weight.data
