"""Differentiable-op plumbing: parameters, the op contract, and the
finite-difference checker every op is tested against.

There is no tape. Each op caches what its backward needs on a LIFO
stack during forward; composites call child backwards in reverse
evaluation order and sum gradients at fan-ins by hand. Parameter
gradients accumulate in place (+=) so repeated application with shared
weights sums contributions, matching what a tape would do.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Parameter", "Op", "collect_params", "collect_ops",
           "clear_caches", "fd_gradcheck", "rel_err"]


class Parameter:
    """A learnable array with an accumulated gradient of the same shape."""

    def __init__(self, data, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad[...] = 0.0

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = np.zeros_like(self.data)
        return self

    def __repr__(self):
        return f"Parameter({self.name or 'unnamed'}, shape={self.data.shape})"


class Op:
    """Base class for differentiable ops.

    Subclasses implement forward(...) -> ndarray and
    backward(gout) -> input gradient(s). forward must push whatever
    backward needs via self.save(...); backward must retrieve it with
    self.saved() (pops, so repeated forward/backward pairs nest LIFO).
    Parameter gradients are accumulated, never assigned.
    """

    def __init__(self):
        self._stack = []

    def save(self, *items):
        self._stack.append(items)

    def saved(self):
        return self._stack.pop()

    def clear_cache(self):
        self._stack.clear()

    def params(self) -> list[Parameter]:
        """All parameters owned by this op, children included."""
        return collect_params(self)

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.params():
            p.astype(dtype)
        return self

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def collect_params(obj, _seen=None) -> list[Parameter]:
    """Recursively gather Parameters from an op's attributes.

    Walks __dict__ values, lists and tuples. Order is deterministic
    (attribute insertion order), which the optimizer and checkpoint
    code rely on.
    """
    if _seen is None:
        _seen = set()
    found = []
    if id(obj) in _seen:
        return found
    _seen.add(id(obj))
    if isinstance(obj, Parameter):
        return [obj]
    if isinstance(obj, (list, tuple)):
        for item in obj:
            found.extend(collect_params(item, _seen))
        return found
    if isinstance(obj, Op):
        for value in obj.__dict__.values():
            found.extend(collect_params(value, _seen))
    return found


def collect_ops(obj, _seen=None) -> list:
    """Every Op reachable from obj (itself included), same walk order
    as collect_params."""
    if _seen is None:
        _seen = set()
    found = []
    if id(obj) in _seen:
        return found
    _seen.add(id(obj))
    if isinstance(obj, (list, tuple)):
        for item in obj:
            found.extend(collect_ops(item, _seen))
        return found
    if isinstance(obj, Op):
        found.append(obj)
        for value in obj.__dict__.values():
            found.extend(collect_ops(value, _seen))
    return found


def clear_caches(obj):
    """Drop every save stack under obj. Needed after forward passes
    that will never be backpropagated (validation, inference), which
    would otherwise leak one stack entry per op per call."""
    for op in collect_ops(obj):
        op.clear_cache()


def rel_err(a: float, b: float) -> float:
    """|a-b| relative to max(1, |a|, |b|); bounded for tiny gradients."""
    return abs(a - b) / max(1.0, abs(a), abs(b))


def fd_gradcheck(forward, grads, arrays, n_probes: int = 120, h: float = 1e-5,
                 seed: int = 0, cotangent=None):
    """Check analytic gradients against central finite differences.

    forward() must run the op from scratch on the current contents of
    `arrays` (a list of float64 ndarrays, perturbed in place here) and
    return the output array. grads(G) must run forward+backward with
    cotangent G and return a list of gradient arrays aligned with
    `arrays`. The scalar probed is L = sum(G * out), so dL/dx equals
    the returned VJP entry. Probes are spread over all coordinates of
    all arrays, at least n_probes total (every coordinate if fewer).

    Returns the worst relative error over the probed coordinates.
    """
    rng = np.random.default_rng(seed)
    for a in arrays:
        if a.dtype != np.float64:
            raise ValueError("fd_gradcheck requires float64 arrays")
    out0 = forward()
    G = cotangent if cotangent is not None else rng.standard_normal(out0.shape)
    analytic = grads(G)
    if len(analytic) != len(arrays):
        raise ValueError("grads() must align with arrays")

    sizes = [a.size for a in arrays]
    total = sum(sizes)
    coords = []
    if total <= n_probes:
        for ai, a in enumerate(arrays):
            coords.extend((ai, flat) for flat in range(a.size))
    else:
        # proportional allocation, at least one probe per array
        for ai, a in enumerate(arrays):
            k = max(1, round(n_probes * a.size / total))
            k = min(k, a.size)
            picks = rng.choice(a.size, size=k, replace=False)
            coords.extend((ai, int(flat)) for flat in picks)

    worst = 0.0
    for ai, flat in coords:
        a = arrays[ai]
        idx = np.unravel_index(flat, a.shape)
        keep = a[idx]
        a[idx] = keep + h
        lp = float(np.vdot(G, forward()))
        a[idx] = keep - h
        lm = float(np.vdot(G, forward()))
        a[idx] = keep
        numeric = (lp - lm) / (2.0 * h)
        worst = max(worst, rel_err(float(analytic[ai][idx]), numeric))
    return worst
