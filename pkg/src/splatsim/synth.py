"""Synthetic scene builders for demos, tests and the estimation self-check.

Lattice blocks and slabs with a color texture (a flat-colored scene renders
identically under deformation, which blinds photometric losses)."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .core import MaterialField, ParticleSystem, lame_from_young_poisson


def _texture(pos: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Smooth gradient plus a checker so every region is visually distinct."""
    span = np.maximum(hi - lo, 1e-12)
    u = (pos - lo) / span
    checker = ((np.floor(u[:, 0] * 6) + np.floor(u[:, 1] * 6)
                + np.floor(u[:, 2] * 6)) % 2)
    col = np.empty_like(pos)
    col[:, 0] = 0.25 + 0.6 * u[:, 0]
    col[:, 1] = 0.25 + 0.6 * u[:, 1]
    col[:, 2] = 0.35 + 0.45 * checker
    return np.clip(col, 0.0, 1.0)


def make_block(counts=(10, 10, 10), center=(0.0, 0.0, 0.0),
               size=(0.4, 0.4, 0.4), density: float = 1000.0,
               young: float = 1.0e4, poisson: float = 0.45,
               eta_v: float = 0.0, gamma_v: float = 0.0,
               jitter: float = 0.0, seed: Optional[int] = None,
               opacity: float = 0.95) -> ParticleSystem:
    """Regular lattice block with consistent mass/volume and splat sizing."""
    counts = np.asarray(counts, dtype=int)
    center = np.asarray(center, dtype=np.float64)
    size = np.asarray(size, dtype=np.float64)
    spacing = size / counts
    axes = [center[a] - size[a] / 2 + (np.arange(counts[a]) + 0.5) * spacing[a]
            for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pos = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    if jitter > 0:
        rng = np.random.default_rng(seed)
        pos = pos + rng.uniform(-jitter, jitter, pos.shape) * spacing
    n = pos.shape[0]
    cell_vol = float(np.prod(spacing))
    ps = ParticleSystem(position=pos)
    ps.mass[:] = density * cell_vol
    ps.volume0[:] = cell_vol
    ps.scale = np.broadcast_to(0.6 * spacing, (n, 3)).copy()
    ps.opacity[:] = opacity
    ps.color = _texture(pos, center - size / 2, center + size / 2)
    ps.material = MaterialField.uniform(n, young=young, poisson=poisson,
                                        eta_v=eta_v, gamma_v=gamma_v)
    return ps


def make_slab(counts=(16, 16, 4), center=(0.0, 0.0, -0.2),
              size=(0.8, 0.8, 0.2), **kw) -> ParticleSystem:
    """Flat slab (anchored scenes, pull-and-release experiments)."""
    return make_block(counts=counts, center=center, size=size, **kw)


def dome_sheet(counts=(24, 24), extent: float = 0.8, base_z: float = 2.05,
               bulge: float = 0.55, **kw) -> ParticleSystem:
    """Single-layer dome-shaped surface at positive depth, the shape surface
    thickening expects: rays toward the origin fill the volume under it."""
    counts = np.asarray(counts, dtype=int)
    ax = [(-extent / 2 + (np.arange(counts[a]) + 0.5) * extent / counts[a])
          for a in range(2)]
    gx, gy = np.meshgrid(*ax, indexing="ij")
    r2 = (gx ** 2 + gy ** 2) / (extent / 2) ** 2
    gz = base_z + bulge * np.clip(1.0 - 0.85 * r2, 0.0, None)
    pos = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    ps = make_block(counts=(1, 1, 1), **kw)   # template for defaults
    out = ParticleSystem(position=pos)
    out.scale[:] = 0.6 * extent / counts[0]
    out.opacity[:] = ps.opacity[0]
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    out.color = _texture(pos, lo, hi)
    out.material = MaterialField.uniform(pos.shape[0])
    return out


def two_cluster_block(counts=(12, 12, 6), center=(0.0, 0.0, 0.0),
                      size=(0.5, 0.5, 0.25), split_axis: int = 0,
                      density: float = 1000.0, poisson: float = 0.45,
                      params_a=(3000.0, 5.0, 0.5), params_b=(9000.0, 40.0, 5.0),
                      **kw) -> ParticleSystem:
    """Block with two material clusters split along an axis; params are
    (young, eta_v, gamma_v) per side."""
    ps = make_block(counts=counts, center=center, size=size,
                    density=density, **kw)
    axis_mid = np.asarray(center, dtype=np.float64)[split_axis]
    right = ps.position[:, split_axis] > axis_mid
    cluster = right.astype(np.int64)
    mat = ps.material
    mat.cluster_id = cluster
    mat.cluster_count = 2
    for cid, (young, eta, gamma) in enumerate([params_a, params_b]):
        mu, lam = lame_from_young_poisson(young, poisson)
        mat.set_cluster(cid, mu_E=mu, lam_E=lam, eta_v=eta, gamma_v=gamma)
    return ps
