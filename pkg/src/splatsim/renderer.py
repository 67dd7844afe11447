"""Deterministic software rasterizer for splat particles.

Splats are projected with the affine approximation of the perspective map,
depth-sorted (ties broken by particle index) and alpha-composited front to
back. A tiled path and a naive full-image path share the same compiled
compositing routine, so they are bit-identical; the tiled path only skips
splats that provably fall below the 1/255 alpha cutoff everywhere in a tile.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import _kernels as K
from .core import Camera, ParticleSystem

EIG_FLOOR = 0.3  # px^2, screen covariance eigenvalue floor


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for an (N,4) array of wxyz quaternions."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _floor_eigenvalues(cov: np.ndarray, floor: float) -> np.ndarray:
    """Clamp eigenvalues of symmetric 2x2 covariances to at least floor."""
    a = cov[:, 0, 0]
    b = cov[:, 0, 1]
    c = cov[:, 1, 1]
    mean = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lo = mean - disc
    hi = mean + disc
    needs = lo < floor
    if not np.any(needs):
        return cov
    out = cov.copy()
    # eigenvector for the large eigenvalue; fall back to x-axis when isotropic
    vx = np.where(np.abs(b) > 1e-300, b, hi - c)
    vy = np.where(np.abs(b) > 1e-300, hi - a, np.zeros_like(b))
    norm = np.sqrt(vx * vx + vy * vy)
    deg = norm < 1e-300
    vx = np.where(deg, 1.0, vx / np.where(deg, 1.0, norm))
    vy = np.where(deg, 0.0, vy / np.where(deg, 1.0, norm))
    l_hi = np.maximum(hi, floor)
    l_lo = np.maximum(lo, floor)
    # cov = l_hi v v^T + l_lo u u^T with u = perp(v)
    na = l_hi * vx * vx + l_lo * vy * vy
    nb = (l_hi - l_lo) * vx * vy
    nc = l_hi * vy * vy + l_lo * vx * vx
    out[needs, 0, 0] = na[needs]
    out[needs, 0, 1] = nb[needs]
    out[needs, 1, 0] = nb[needs]
    out[needs, 1, 1] = nc[needs]
    return out


@dataclass
class ProjectedSplats:
    """Screen-space splats in depth order (ties broken by particle index)."""

    means: np.ndarray      # (M,2) pixel centers
    cov: np.ndarray        # (M,2,2) screen covariance (eigenvalues floored)
    inv_a: np.ndarray      # inverse covariance terms [[a,b],[b,c]]
    inv_b: np.ndarray
    inv_c: np.ndarray
    depths: np.ndarray     # (M,) camera-space z
    opacity: np.ndarray
    colors: np.ndarray
    radii: np.ndarray      # conservative 1/255-alpha cutoff radius, pixels
    indices: np.ndarray    # original particle indices

    @property
    def count(self) -> int:
        return int(self.means.shape[0])


def project_splats(particles: ParticleSystem, camera: Camera) -> ProjectedSplats:
    """Project all splats; behind-near-plane splats are culled, not errors."""
    n = particles.n
    if n == 0:
        e = np.empty
        return ProjectedSplats(e((0, 2)), e((0, 2, 2)), e(0), e(0), e(0), e(0),
                               e(0), e((0, 3)), e(0), np.empty(0, dtype=np.int64))
    cam = camera.world_to_camera(particles.position)
    valid = cam[:, 2] > camera.near
    idx = np.nonzero(valid)[0]
    cam = cam[idx]
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]

    means = np.stack([camera.fx * x / z + camera.cx,
                      camera.fy * y / z + camera.cy], axis=1)

    Rq = quat_to_matrix(particles.rotation[idx])
    M = Rq * particles.scale[idx][:, None, :]
    sigma = M @ np.transpose(M, (0, 2, 1))
    sigma_cam = camera.R @ sigma @ camera.R.T

    m = idx.shape[0]
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * x / z ** 2
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * y / z ** 2
    cov = J @ sigma_cam @ np.transpose(J, (0, 2, 1))
    cov = _floor_eigenvalues(cov, EIG_FLOOR)

    a = cov[:, 0, 0]
    b = cov[:, 0, 1]
    c = cov[:, 1, 1]
    det = a * c - b * b
    inv_a = c / det
    inv_b = -b / det
    inv_c = a / det

    opac = particles.opacity[idx]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    gain = 2.0 * np.log(np.maximum(255.0 * opac, 1e-300)) * lam_max
    radii = np.sqrt(np.maximum(gain, 0.0)) * (1.0 + 1e-9) + 1e-9

    order = np.lexsort((idx, z))
    return ProjectedSplats(
        means=means[order], cov=cov[order],
        inv_a=inv_a[order], inv_b=inv_b[order], inv_c=inv_c[order],
        depths=z[order], opacity=opac[order],
        colors=particles.color[idx][order], radii=radii[order],
        indices=idx[order])


def project_splat(particles: ParticleSystem, i: int, camera: Camera):
    """Single-splat projection: (pixel_center, screen covariance, depth), or
    None when the splat is behind the near plane (culled)."""
    cam = camera.world_to_camera(particles.position[i].reshape(1, 3))[0]
    if cam[2] <= camera.near:
        return None
    sub = ParticleSystem(position=particles.position[i].reshape(1, 3),
                         rotation=particles.rotation[i].reshape(1, 4),
                         scale=particles.scale[i].reshape(1, 3),
                         opacity=particles.opacity[i].reshape(1),
                         color=particles.color[i].reshape(1, 3))
    proj = project_splats(sub, camera)
    return proj.means[0], proj.cov[0], float(proj.depths[0])


@dataclass
class RenderResult:
    rgb: np.ndarray     # (H,W,3) float in [0,1]
    alpha: np.ndarray   # (H,W) float in [0,1]
    depth: np.ndarray   # (H,W) camera z of front-most contributing splat, 0 = none


def render(particles: ParticleSystem, camera: Camera,
           tile_size: int = 16, naive: bool = False) -> RenderResult:
    """Rasterize the scene. naive=True runs the reference full-image loop;
    the default tiled path produces bit-identical output."""
    W, H = camera.width, camera.height
    rgb = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    depth = np.zeros((H, W))
    proj = project_splats(particles, camera)
    if proj.count == 0:
        return RenderResult(rgb, alpha, depth)
    if naive:
        ids = np.arange(proj.count, dtype=np.int64)
        K.composite_block(ids, proj.means, proj.inv_a, proj.inv_b, proj.inv_c,
                          proj.opacity, proj.colors, proj.depths,
                          0, 0, W, H, rgb, alpha, depth)
        return RenderResult(rgb, alpha, depth)

    tiles_x = (W + tile_size - 1) // tile_size
    tiles_y = (H + tile_size - 1) // tile_size
    # conservative per-axis tile ranges from the alpha-cutoff radius
    lo_x = np.clip(((proj.means[:, 0] - proj.radii) - 0.5) // tile_size, 0, tiles_x - 1).astype(np.int64)
    hi_x = np.clip(((proj.means[:, 0] + proj.radii) - 0.5) // tile_size, 0, tiles_x - 1).astype(np.int64)
    lo_y = np.clip(((proj.means[:, 1] - proj.radii) - 0.5) // tile_size, 0, tiles_y - 1).astype(np.int64)
    hi_y = np.clip(((proj.means[:, 1] + proj.radii) - 0.5) // tile_size, 0, tiles_y - 1).astype(np.int64)
    # cull splats whose cutoff disc misses every pixel center
    on = ((proj.means[:, 0] + proj.radii >= 0.5)
          & (proj.means[:, 0] - proj.radii <= W - 0.5)
          & (proj.means[:, 1] + proj.radii >= 0.5)
          & (proj.means[:, 1] - proj.radii <= H - 0.5))
    splat_ids = np.nonzero(on)[0]
    counts = (hi_x[splat_ids] - lo_x[splat_ids] + 1) * (hi_y[splat_ids] - lo_y[splat_ids] + 1)
    rep = np.repeat(splat_ids, counts)
    # enumerate covered tiles per splat
    starts = np.cumsum(counts) - counts
    offs = np.arange(rep.shape[0], dtype=np.int64) - np.repeat(starts, counts)
    wx = (hi_x[rep] - lo_x[rep] + 1)
    tx = lo_x[rep] + offs % wx
    ty = lo_y[rep] + offs // wx
    tile_of = ty * tiles_x + tx
    order = np.lexsort((rep, tile_of))
    tile_sorted = tile_of[order]
    splat_sorted = rep[order]
    bounds = np.searchsorted(tile_sorted, np.arange(tiles_x * tiles_y + 1))
    for t in range(tiles_x * tiles_y):
        s0, s1 = bounds[t], bounds[t + 1]
        if s0 == s1:
            continue
        ty_, tx_ = divmod(t, tiles_x)
        x0 = tx_ * tile_size
        y0 = ty_ * tile_size
        w = min(tile_size, W - x0)
        h = min(tile_size, H - y0)
        K.composite_block(splat_sorted[s0:s1], proj.means,
                          proj.inv_a, proj.inv_b, proj.inv_c,
                          proj.opacity, proj.colors, proj.depths,
                          x0, y0, w, h, rgb, alpha, depth)
    return RenderResult(rgb, alpha, depth)


def masked_l1(image_a: np.ndarray, image_b: np.ndarray,
              mask: np.ndarray) -> float:
    """Mean over mask-true pixels of the summed absolute channel difference.

    An empty mask yields 0.0 and emits a RuntimeWarning.
    """
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if m.shape != a.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {a.shape[:2]}")
    count = int(m.sum())
    if count == 0:
        warnings.warn("masked_l1 over an empty mask", RuntimeWarning)
        return 0.0
    diff = np.abs(a - b).sum(axis=-1)
    return float(diff[m].sum() / count)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    """Write an image (float [0,1], HxWx3 or HxW) as 8-bit PNG."""
    arr = to_uint8(img)
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode).save(Path(path), format="PNG")


def load_png(path) -> np.ndarray:
    img = Image.open(Path(path))
    arr = np.asarray(img, dtype=np.float64) / 255.0
    return arr


def save_float_array(path, arr: np.ndarray) -> None:
    """Raw 32-bit float dump (npy container)."""
    np.save(Path(path), np.asarray(arr, dtype=np.float32))


def load_float_array(path) -> np.ndarray:
    return np.load(Path(path)).astype(np.float32)


def unproject_pixel(camera: Camera, px: float, py: float, depth: float) -> np.ndarray:
    """World point on the ray through pixel (px, py) at camera depth z."""
    d = np.array([(px - camera.cx) / camera.fx * depth,
                  (py - camera.cy) / camera.fy * depth,
                  depth])
    return camera.camera_to_world(d)
