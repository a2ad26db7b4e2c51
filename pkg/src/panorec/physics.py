"""Beer-Lambert forward projection and procedural jaw phantoms.

A pixel (j, i) of the panoramic image sees column i's axial ray lifted
to constant height z = j (parallel vertical geometry, no fan): the
machine's rotating source is approximated by the static elliptical
orbit defined in geometry. Intensity is I0 * exp(-path integral of
attenuation), integrated by a Riemann sum with trilinear sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TroughGeometry, _inside, trace_column_ray

__all__ = ["Phantom", "trilinear_sample", "integrate_ray",
           "synthesize_px", "make_phantom"]

I0_DEFAULT = 255.0
DS_DATASET = 0.25
SHELL_MU = 0.05
TOOTH_MU = 0.15


def trilinear_sample(V: np.ndarray, pz, px, py):
    """Trilinear interpolation of V[z, x, y] at float coordinates;
    contributions outside the grid are zero."""
    pz = np.asarray(pz, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    z0 = np.floor(pz).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fz, fx, fy = pz - z0, px - x0, py - y0
    out = np.zeros(np.broadcast(pz, px, py).shape, dtype=V.dtype)
    nz, nx, ny = V.shape
    for dz in (0, 1):
        wz = np.where(dz == 0, 1.0 - fz, fz)
        zc = z0 + dz
        okz = (zc >= 0) & (zc < nz)
        for dx in (0, 1):
            wx = np.where(dx == 0, 1.0 - fx, fx)
            xc = x0 + dx
            okx = (xc >= 0) & (xc < nx)
            for dy in (0, 1):
                wy = np.where(dy == 0, 1.0 - fy, fy)
                yc = y0 + dy
                ok = okz & okx & (yc >= 0) & (yc < ny)
                w = wz * wx * wy * ok
                out += w * V[np.clip(zc, 0, nz - 1),
                             np.clip(xc, 0, nx - 1),
                             np.clip(yc, 0, ny - 1)]
    return out


def integrate_ray(V: np.ndarray, origin, direction, t0: float, t1: float,
                  ds: float) -> float:
    """Riemann sum of V along origin + t*direction for t in [t0, t1)."""
    if ds <= 0:
        raise ValueError("ds must be positive")
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    o = np.asarray(origin, dtype=np.float64)
    ts = np.arange(t0, t1, ds)
    samples = trilinear_sample(V, o[0] + ts * d[0], o[1] + ts * d[1],
                               o[2] + ts * d[2])
    return float(samples.sum() * ds)


def synthesize_px(V: np.ndarray, geom: TroughGeometry,
                  I0: float = I0_DEFAULT, ds: float = DS_DATASET):
    """Panoramic image [H, W]: I(j,i) = I0 * exp(-path length).

    Rays are horizontal, so bilinear in-plane weights are shared
    across all rows of a column; the result matches per-pixel
    integrate_ray up to float accumulation order.
    """
    if ds <= 0:
        raise ValueError("ds must be positive")
    H, nx, ny = V.shape
    if (nx, ny) != (geom.nx, geom.ny):
        raise ValueError("volume axial extents do not match geometry")
    V2 = V.reshape(H, nx * ny)
    path = np.empty((H, geom.W), dtype=np.float64)
    for i in range(geom.W):
        ray = trace_column_ray(i, geom)
        ts = np.arange(ray.t_min, ray.t_max, ds)
        px = ray.origin[0] + ts * ray.direction[0]
        py = ray.origin[1] + ts * ray.direction[1]
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
        fx, fy = px - x0, py - y0
        acc = np.zeros(H, dtype=np.float64)
        for dx in (0, 1):
            wx = (1.0 - fx) if dx == 0 else fx
            xc = x0 + dx
            okx = (xc >= 0) & (xc < nx)
            for dy in (0, 1):
                wy = (1.0 - fy) if dy == 0 else fy
                yc = y0 + dy
                ok = okx & (yc >= 0) & (yc < ny)
                w = wx * wy * ok
                lin = np.clip(xc, 0, nx - 1) * ny + np.clip(yc, 0, ny - 1)
                acc += V2[:, lin] @ w
        path[:, i] = acc * ds
    return I0 * np.exp(-path)


@dataclass
class Tooth:
    cx: float
    cy: float
    cz: float
    rx: float
    ry: float
    rz: float
    mu: float


@dataclass
class Phantom:
    volume: np.ndarray          # [H, nx, ny] attenuation
    teeth: list
    shell_mu: float
    seed: int


def make_phantom(seed: int, rows: int, geom: TroughGeometry,
                 teeth_count: int = 8) -> Phantom:
    """Horseshoe bone shell between the trough ellipses plus
    `teeth_count` denser ellipsoids centered on the mid-trough ellipse
    at jittered equal angular spacing; zero background. Deterministic
    in seed; overlapping teeth are an error (the arch is too crowded).
    """
    if teeth_count < 0:
        raise ValueError("teeth_count must be >= 0")
    rng = np.random.default_rng(seed)
    H, nx, ny = rows, geom.nx, geom.ny
    gx, gy = np.meshgrid(np.arange(nx, dtype=np.float64),
                         np.arange(ny, dtype=np.float64), indexing="ij")
    in_outer = _inside(gx, gy, geom.outer)
    shell_plane = in_outer & ~_inside(gx, gy, geom.inner)

    mu = np.zeros((H, nx, ny))
    mu[:, shell_plane] = SHELL_MU

    mid = geom.mid
    spacing = np.pi / max(teeth_count, 1)
    teeth = []
    overlap = np.zeros((H, nx, ny), dtype=np.int32)
    gz = np.arange(H, dtype=np.float64)[:, None, None]
    for c in range(teeth_count):
        theta = spacing * (c + 0.5) + rng.uniform(-0.1, 0.1) * spacing
        cx = geom.h - mid.b * np.cos(theta)
        cy = geom.k + mid.a * np.sin(theta)
        cz = (H - 1) / 2.0 + rng.uniform(-0.08, 0.08) * H
        rxy = rng.uniform(0.030, 0.042, size=2) * min(nx, ny)
        rz = rng.uniform(0.12, 0.19) * H
        t_mu = TOOTH_MU * rng.uniform(0.9, 1.1)
        tooth = Tooth(cx, cy, cz, rxy[0], rxy[1], rz, t_mu)
        teeth.append(tooth)
        inside = (((gx - cx) / tooth.rx) ** 2
                  + ((gy - cy) / tooth.ry) ** 2
                  + ((gz - cz) / tooth.rz) ** 2) <= 1.0
        inside &= in_outer  # axial support stays in the outer ellipse
        overlap += inside
        mu[inside] = t_mu
    if (overlap > 1).any():
        raise ValueError(
            f"{teeth_count} teeth do not fit without overlap (seed {seed})")
    return Phantom(mu, teeth, SHELL_MU, seed)
