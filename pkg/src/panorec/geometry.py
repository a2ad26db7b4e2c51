"""Focal-trough geometry: confocal ellipses, per-column rays, the
precomputed warp table, scatter/flatten between flattened depth fields
and axial volumes, the trough mask, and MIP projections.

Axis layout, used everywhere downstream: volumes are [H, W, D] =
[vertical row j, axial x, axial y]. A panoramic image is [H, W] with
row j and column i. A flattened depth field is [K, H, W] with depth
bin k along each column's ray. Ellipse membership in the axial plane
is (x-h)^2/b^2 + (y-k)^2/a^2 <= 1 (b pairs with x, a with y).

Column i gets bearing theta_i = pi*(i+0.5)/W sweeping the horseshoe
from the left limb over the anterior to the right limb. The ray
origin sits on a circle of radius 1.25*max(a1,b1) at that bearing and
aims at the mid-trough ellipse point (semi-axes averaged), entering
the trough close to its normal; the real machine's rotating
source/detector sweep is approximated by this static orbit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Ellipse", "TroughGeometry", "Ray", "WarpTable",
    "ellipse_contains", "trace_column_ray", "first_k_trough_samples",
    "build_warp_table", "scatter", "scatter_vjp", "flatten", "flatten_vjp",
    "build_mask", "mip", "mip_with_argmax", "mip_vjp",
    "round_half_away", "toy_geometry", "paper_geometry",
]

MIP_AXES = {"axial": 2, "sagittal": 1, "coronal": 0}


@dataclass(frozen=True)
class Ellipse:
    h: float
    k: float
    a: float  # semi-axis along y
    b: float  # semi-axis along x

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("semi-axes must be positive")


def ellipse_contains(p, e: Ellipse) -> bool:
    x, y = p
    return (x - e.h) ** 2 / e.b ** 2 + (y - e.k) ** 2 / e.a ** 2 <= 1.0


def _inside(px, py, e: Ellipse):
    # vectorized membership
    return (px - e.h) ** 2 / e.b ** 2 + (py - e.k) ** 2 / e.a ** 2 <= 1.0


@dataclass(frozen=True)
class TroughGeometry:
    h: float
    k: float
    a1: float
    b1: float
    a2: float
    b2: float
    W: int
    K: int
    dt: float = 0.5
    nx: int = 64  # axial extent along x (volume axis 1)
    ny: int = 64  # axial extent along y (volume axis 2)

    def __post_init__(self):
        if not (self.a1 > self.a2 > 0 and self.b1 > self.b2 > 0):
            raise ValueError("outer ellipse must strictly contain inner")
        if self.W < 1 or self.K < 1:
            raise ValueError("W and K must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def outer(self) -> Ellipse:
        return Ellipse(self.h, self.k, self.a1, self.b1)

    @property
    def inner(self) -> Ellipse:
        return Ellipse(self.h, self.k, self.a2, self.b2)

    @property
    def mid(self) -> Ellipse:
        return Ellipse(self.h, self.k, (self.a1 + self.a2) / 2,
                       (self.b1 + self.b2) / 2)

    def to_config(self) -> dict:
        return {"h": self.h, "k": self.k, "a1": self.a1, "b1": self.b1,
                "a2": self.a2, "b2": self.b2, "W": self.W, "K": self.K,
                "dt": self.dt}

    @classmethod
    def from_config(cls, cfg: dict, nx: int, ny: int) -> "TroughGeometry":
        return cls(nx=nx, ny=ny, **cfg)


def toy_geometry() -> TroughGeometry:
    """Desk-scale defaults for a 32x64x64 volume and 32x64 image."""
    return TroughGeometry(h=32.0, k=36.0, a1=26.0, b1=22.0,
                          a2=14.0, b2=10.0, W=64, K=12, dt=0.5,
                          nx=64, ny=64)


def paper_geometry() -> TroughGeometry:
    """Full-scale extents (128x256x256 volume, 256-column image, K=96);
    trough axes are the toy shape scaled 4x."""
    return TroughGeometry(h=128.0, k=144.0, a1=104.0, b1=88.0,
                          a2=56.0, b2=40.0, W=256, K=96, dt=0.5,
                          nx=256, ny=256)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray    # (2,) axial
    direction: np.ndarray  # (2,) unit
    t_min: float
    t_max: float


def trace_column_ray(i: int, geom: TroughGeometry) -> Ray:
    if not 0 <= i < geom.W:
        raise ValueError(f"column {i} outside [0, {geom.W})")
    theta = np.pi * (i + 0.5) / geom.W
    mid = geom.mid
    target = np.array([geom.h - mid.b * np.cos(theta),
                       geom.k + mid.a * np.sin(theta)])
    radius = 1.25 * max(geom.a1, geom.b1)
    origin = np.array([geom.h - radius * np.cos(theta),
                       geom.k + radius * np.sin(theta)])
    d = target - origin
    d = d / np.linalg.norm(d)
    return Ray(origin, d, 0.0, 2.5 * radius)


def first_k_trough_samples(ray: Ray, geom: TroughGeometry, K: int):
    """March at uniform dt; keep points inside the outer ellipse and
    outside the inner one, in entry order, up to K.

    Returns (x[K], y[K], valid[K]); invalid tail entries hold 0.
    """
    ts = np.arange(ray.t_min, ray.t_max, geom.dt)
    px = ray.origin[0] + ts * ray.direction[0]
    py = ray.origin[1] + ts * ray.direction[1]
    keep = _inside(px, py, geom.outer) & ~_inside(px, py, geom.inner)
    sel = np.nonzero(keep)[0][:K]
    x = np.zeros(K)
    y = np.zeros(K)
    valid = np.zeros(K, dtype=bool)
    x[:sel.size] = px[sel]
    y[:sel.size] = py[sel]
    valid[:sel.size] = True
    return x, y, valid


def round_half_away(x):
    """Round half away from zero (platform-stable, unlike banker's)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class WarpTable:
    x: np.ndarray        # [W, K] float sample coords
    y: np.ndarray        # [W, K]
    valid: np.ndarray    # [W, K] bool
    ix: np.ndarray       # [W, K] int voxel indices (clamped)
    iy: np.ndarray       # [W, K]
    nx: int
    ny: int
    # flattened caches for scatter/flatten, over valid entries only
    e_i: np.ndarray = field(repr=False, default=None)
    e_k: np.ndarray = field(repr=False, default=None)
    e_lin: np.ndarray = field(repr=False, default=None)
    counts: np.ndarray = field(repr=False, default=None)

    @property
    def W(self) -> int:
        return self.x.shape[0]

    @property
    def K(self) -> int:
        return self.x.shape[1]

    def n_collisions(self) -> int:
        return int((self.counts[self.counts > 1] - 1).sum())


def build_warp_table(geom: TroughGeometry) -> WarpTable:
    W, K = geom.W, geom.K
    x = np.zeros((W, K))
    y = np.zeros((W, K))
    valid = np.zeros((W, K), dtype=bool)
    for i in range(W):
        ray = trace_column_ray(i, geom)
        x[i], y[i], valid[i] = first_k_trough_samples(ray, geom, K)
    if not valid.any():
        raise ValueError("geometry yields an empty trough")
    ix = np.clip(round_half_away(x), 0, geom.nx - 1).astype(np.int64)
    iy = np.clip(round_half_away(y), 0, geom.ny - 1).astype(np.int64)
    ix[~valid] = 0
    iy[~valid] = 0
    e_i, e_k = np.nonzero(valid)
    e_lin = ix[e_i, e_k] * geom.ny + iy[e_i, e_k]
    counts = np.bincount(e_lin, minlength=geom.nx * geom.ny)
    return WarpTable(x, y, valid, ix, iy, geom.nx, geom.ny,
                     e_i=e_i, e_k=e_k, e_lin=e_lin, counts=counts)


def _check_field(F, table, rows=None):
    if F.ndim != 3 or F.shape[0] != table.K or F.shape[2] != table.W:
        raise ValueError(f"field shape {F.shape} does not match table "
                         f"K={table.K}, W={table.W}")
    if rows is not None and F.shape[1] != rows:
        raise ValueError("row extent mismatch")


def scatter(F: np.ndarray, table: WarpTable):
    """Pour F(k,j,i) into V[j, ix, iy] for every valid table entry,
    broadcasting rows j unchanged; collisions average (sum and count
    accumulated separately, divided once, so order cannot matter)."""
    _check_field(F, table)
    H = F.shape[1]
    gathered = F[table.e_k, :, table.e_i]          # [E, H]
    S = np.zeros((table.nx * table.ny, H), dtype=F.dtype)
    np.add.at(S, table.e_lin, gathered)
    denom = np.maximum(table.counts, 1).astype(F.dtype)
    S /= denom[:, None]
    return S.T.reshape(H, table.nx, table.ny)


def scatter_vjp(gV: np.ndarray, table: WarpTable) -> np.ndarray:
    """Adjoint of scatter including the collision averaging: each valid
    entry receives the destination voxel's gradient over its count."""
    H = gV.shape[0]
    g2 = gV.reshape(H, -1)
    denom = np.maximum(table.counts, 1).astype(gV.dtype)
    picked = g2[:, table.e_lin] / denom[table.e_lin]   # [H, E]
    gF = np.zeros((table.K, H, table.W), dtype=gV.dtype)
    gF[table.e_k, :, table.e_i] = picked.T
    return gF


def flatten(V: np.ndarray, table: WarpTable) -> np.ndarray:
    """Sample V at each table entry (nearest voxel): F(k,j,i) =
    V[j, ix, iy]; invalid entries are 0."""
    if V.ndim != 3 or V.shape[1] != table.nx or V.shape[2] != table.ny:
        raise ValueError(f"volume shape {V.shape} does not match table")
    H = V.shape[0]
    V2 = V.reshape(H, -1)
    F = np.zeros((table.K, H, table.W), dtype=V.dtype)
    F[table.e_k, :, table.e_i] = V2[:, table.e_lin].T
    return F


def flatten_vjp(gF: np.ndarray, table: WarpTable, rows: int) -> np.ndarray:
    _check_field(gF, table, rows)
    gathered = gF[table.e_k, :, table.e_i]         # [E, H]
    S = np.zeros((table.nx * table.ny, rows), dtype=gF.dtype)
    np.add.at(S, table.e_lin, gathered)
    return S.T.reshape(rows, table.nx, table.ny)


def build_mask(table: WarpTable, rows: int) -> np.ndarray:
    """1 exactly where scatter can write, broadcast over rows."""
    support = np.zeros(table.nx * table.ny)
    support[table.e_lin] = 1.0
    plane = support.reshape(table.nx, table.ny)
    return np.broadcast_to(plane, (rows, table.nx, table.ny)).copy()


def mip(V: np.ndarray, view: str) -> np.ndarray:
    if view not in MIP_AXES:
        raise ValueError(f"view must be one of {sorted(MIP_AXES)}")
    return V.max(axis=MIP_AXES[view])


def mip_with_argmax(V: np.ndarray, view: str):
    """MIP plus the argmax indices its VJP routes gradient to; ties go
    to the lowest index along the reduced axis."""
    axis = MIP_AXES[view]
    idx = V.argmax(axis=axis)
    return np.take_along_axis(V, np.expand_dims(idx, axis),
                              axis=axis).squeeze(axis), idx


def mip_vjp(g: np.ndarray, idx: np.ndarray, view: str,
            shape: tuple) -> np.ndarray:
    axis = MIP_AXES[view]
    gV = np.zeros(shape, dtype=g.dtype)
    np.put_along_axis(gV, np.expand_dims(idx, axis),
                      np.expand_dims(g, axis), axis=axis)
    return gV
