"""Scene ingestion and preparation: binary scene container IO, point-cloud
import, normalization into the simulation cube, surface thickening and
neighbor queries."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels as K
from .core import DOMAIN_MIN, Grid, ParticleSystem, SceneError, SimConfig

MAGIC = b"SPLATSCN"
VERSION = 1
_REC = struct.Struct("<14f")  # pos3 quat4 scale3 opacity color3


def save_scene(path, particles: ParticleSystem) -> None:
    """Write the binary scene container (little-endian float32 records)."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, particles.n))
        rec = np.empty((particles.n, 14), dtype="<f4")
        rec[:, 0:3] = particles.position
        rec[:, 3:7] = particles.rotation
        rec[:, 7:10] = particles.scale
        rec[:, 10] = particles.opacity
        rec[:, 11:14] = particles.color
        fh.write(rec.tobytes())


def load_scene(path) -> ParticleSystem:
    """Read a scene container; simulation fields get defaults (uniform mass,
    F = I, zero velocity)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"scene file not found: {path}")
    data = path.read_bytes()
    if len(data) == 0:
        raise SceneError(f"{path}: empty scene")
    if len(data) < 16:
        raise SceneError(f"{path}: truncated header")
    if data[:8] != MAGIC:
        raise SceneError(f"{path}: bad magic (not a scene container)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise SceneError(f"{path}: unsupported version {version}")
    expected = 16 + count * _REC.size
    if len(data) != expected:
        raise SceneError(f"{path}: expected {expected} bytes for {count} "
                         f"records, got {len(data)}")
    rec = np.frombuffer(data, dtype="<f4", offset=16).reshape(count, 14)
    rec = rec.astype(np.float64)
    return ParticleSystem(
        position=rec[:, 0:3],
        rotation=rec[:, 3:7] if count else None,
        scale=rec[:, 7:10] if count else None,
        opacity=rec[:, 10] if count else None,
        color=rec[:, 11:14] if count else None,
    )


def import_point_cloud(path) -> ParticleSystem:
    """Import a polygon-format point cloud (.ply, ascii or binary little
    endian), mapping position and color; every other attribute defaults."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = []
        while True:
            line = fh.readline()
            if not line:
                raise SceneError(f"{path}: truncated header")
            header.append(line.decode("ascii", "replace").strip())
            if header[-1] == "end_header":
                break
        if not header or header[0] != "ply":
            raise SceneError(f"{path}: not a polygon point-cloud file")
        fmt = None
        n_vertex = 0
        props: list[tuple[str, str]] = []
        in_vertex = False
        for ln in header[1:]:
            parts = ln.split()
            if not parts:
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                in_vertex = parts[1] == "vertex"
                if in_vertex:
                    n_vertex = int(parts[2])
            elif parts[0] == "property" and in_vertex:
                props.append((parts[1], parts[2]))
        if fmt not in ("ascii", "binary_little_endian"):
            raise SceneError(f"{path}: unsupported format {fmt}")
        names = [p[1] for p in props]
        for ax in ("x", "y", "z"):
            if ax not in names:
                raise SceneError(f"{path}: vertex element lacks {ax}")
        if fmt == "ascii":
            body = fh.read().decode("ascii", "replace").split()
            vals = np.array(body[: n_vertex * len(props)], dtype=np.float64)
            if vals.size != n_vertex * len(props):
                raise SceneError(f"{path}: truncated vertex data")
            table = vals.reshape(n_vertex, len(props))
            cols = {name: table[:, i] for i, (_, name) in enumerate(props)}
        else:
            np_types = {"float": "<f4", "float32": "<f4", "double": "<f8",
                        "float64": "<f8", "uchar": "u1", "uint8": "u1",
                        "char": "i1", "int8": "i1", "short": "<i2",
                        "ushort": "<u2", "int": "<i4", "int32": "<i4",
                        "uint": "<u4", "uint32": "<u4"}
            try:
                dt = np.dtype([(name, np_types[t]) for t, name in props])
            except KeyError as exc:
                raise SceneError(f"{path}: unsupported property type {exc}")
            raw = fh.read(dt.itemsize * n_vertex)
            if len(raw) < dt.itemsize * n_vertex:
                raise SceneError(f"{path}: truncated vertex data")
            table = np.frombuffer(raw, dtype=dt, count=n_vertex)
            cols = {name: table[name].astype(np.float64) for _, name in props}
    if n_vertex == 0:
        raise SceneError(f"{path}: empty scene")
    pos = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    color = None
    if all(c in cols for c in ("red", "green", "blue")):
        color = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1)
        if color.max() > 1.0:
            color = color / 255.0
    return ParticleSystem(position=pos, color=color)


@dataclass(frozen=True)
class Transform:
    """x' = scale * x + offset, uniform scale plus translation."""

    scale: float
    offset: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points * self.scale + self.offset

    def invert(self, points: np.ndarray) -> np.ndarray:
        return (points - self.offset) / self.scale

    def inverse(self) -> "Transform":
        return Transform(1.0 / self.scale, -np.asarray(self.offset) / self.scale)


def normalize(particles: ParticleSystem, margin: float = 0.05
              ) -> tuple[ParticleSystem, Transform]:
    """Fit positions into the 2-unit cube with the given relative margin.

    Uniform scale and translation only; splat scales, velocities and rest
    volumes are rescaled consistently. Returns the applied transform.
    """
    if particles.n == 0:
        raise SceneError("cannot normalize an empty scene")
    pos = particles.position
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0.0:
        raise SceneError("degenerate scene: zero spatial extent")
    s = 2.0 * (1.0 - margin) / extent
    center = 0.5 * (lo + hi)
    offset = -s * center
    tf = Transform(s, offset)
    out = particles.copy()
    out.position = tf.apply(pos)
    out.velocity = particles.velocity * s
    out.scale = particles.scale * s
    out.volume0 = particles.volume0 * s ** 3
    return out, tf


class ThickenInfo(NamedTuple):
    layers: int
    z_expand: float
    seed: Optional[int]
    kept_copies: int
    cap: Optional[int]
    capped: bool


def thicken(particles: ParticleSystem, layers: int = 1000,
            z_expand: float = 0.25, seed: Optional[int] = 0,
            cap: Optional[int] = None,
            rng: Optional[np.random.Generator] = None
            ) -> tuple[ParticleSystem, ThickenInfo]:
    """Give a reconstructed surface a volumetric interior by replicating
    kernels along rays toward the origin.

    For each layer l in 1..layers, every source kernel spawns a copy at
    mu * (rand(3) + l) / layers (componentwise uniform rand in [0,1)); the
    copy is kept iff it lies in the source bounding box with the z maximum
    expanded by z_expand. Copies inherit all source attributes. Requires all
    source z strictly positive so rays fill depth rather than crossing the
    camera; callers with centered scenes translate first.

    cap, when given, uniformly subsamples kept copies so the total count does
    not exceed it (recorded in the returned info).
    """
    n = particles.n
    if n == 0:
        raise SceneError("cannot thicken an empty scene")
    if layers < 1:
        raise ValueError("layers must be >= 1")
    pos = particles.position
    if np.any(pos[:, 2] <= 0.0):
        raise SceneError("thicken requires strictly positive z coordinates")
    if cap is not None and cap < n:
        raise ValueError(f"cap {cap} is below the source particle count {n}")
    if rng is None:
        rng = np.random.default_rng(seed)
    lo = pos.min(axis=0)
    hi = pos.max(axis=0)
    hi_keep = hi.copy()
    hi_keep[2] = (1.0 + z_expand) * hi[2]

    kept_pos: list[np.ndarray] = []
    kept_src: list[np.ndarray] = []
    for layer in range(1, layers + 1):
        factors = (rng.random((n, 3)) + layer) / layers
        cand = pos * factors
        keep = np.all((cand >= lo) & (cand <= hi_keep), axis=1)
        if np.any(keep):
            kept_pos.append(cand[keep])
            kept_src.append(np.nonzero(keep)[0])
    if kept_pos:
        new_pos = np.concatenate(kept_pos, axis=0)
        src = np.concatenate(kept_src, axis=0)
    else:
        new_pos = np.empty((0, 3))
        src = np.empty(0, dtype=np.int64)
    kept_before_cap = int(src.shape[0])
    capped = False
    if cap is not None and n + kept_before_cap > cap:
        take = cap - n
        sel = np.sort(rng.choice(kept_before_cap, size=take, replace=False))
        new_pos = new_pos[sel]
        src = src[sel]
        capped = True

    out = ParticleSystem(
        position=np.concatenate([pos, new_pos], axis=0),
        velocity=np.concatenate([particles.velocity, particles.velocity[src]]),
        mass=np.concatenate([particles.mass, particles.mass[src]]),
        volume0=np.concatenate([particles.volume0, particles.volume0[src]]),
        F_E=np.concatenate([particles.F_E, particles.F_E[src]]),
        F_v=np.concatenate([particles.F_v, particles.F_v[src]]),
        C=np.concatenate([particles.C, particles.C[src]]),
        opacity=np.concatenate([particles.opacity, particles.opacity[src]]),
        rotation=np.concatenate([particles.rotation, particles.rotation[src]]),
        scale=np.concatenate([particles.scale, particles.scale[src]]),
        color=np.concatenate([particles.color, particles.color[src]]),
        R_polar=np.concatenate([particles.R_polar, particles.R_polar[src]]),
    )
    mat = particles.material
    out.material = type(mat)(
        mu_E=np.concatenate([mat.mu_E, mat.mu_E[src]]),
        lam_E=np.concatenate([mat.lam_E, mat.lam_E[src]]),
        eta_v=np.concatenate([mat.eta_v, mat.eta_v[src]]),
        gamma_v=np.concatenate([mat.gamma_v, mat.gamma_v[src]]),
        cluster_id=np.concatenate([mat.cluster_id, mat.cluster_id[src]]),
        cluster_count=mat.cluster_count,
    )
    info = ThickenInfo(layers, z_expand, seed, int(src.shape[0]), cap, capped)
    return out, info


def knn(positions: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbors per point, self excluded, sorted by ascending
    distance with ties broken by lower index. Returns an (n, k) index array.

    A kd-tree supplies candidate sets; ordering is decided by exact squared
    distances so results match a brute-force scan bit for bit.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = positions.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        raise ValueError(f"k = {k} must be below the point count {n}")
    tree = cKDTree(positions)
    # kth-neighbor distance upper bound (self included -> k+1 results)
    dists, _ = tree.query(positions, k=k + 1)
    radius = dists[:, -1] * (1.0 + 1e-12) + 1e-300
    out = np.empty((n, k), dtype=np.int64)
    groups = tree.query_ball_point(positions, radius)
    for i in range(n):
        cand = np.asarray(groups[i], dtype=np.int64)
        cand = cand[cand != i]
        delta = positions[cand] - positions[i]
        d2 = np.einsum("ij,ij->i", delta, delta)
        order = np.lexsort((cand, d2))
        sel = cand[order[:k]]
        if sel.shape[0] < k:
            # radius underestimate (degenerate clusters); widen to all points
            cand = np.delete(np.arange(n, dtype=np.int64), i)
            delta = positions[cand] - positions[i]
            d2 = np.einsum("ij,ij->i", delta, delta)
            order = np.lexsort((cand, d2))
            sel = cand[order[:k]]
        out[i] = sel
    return out


def estimate_rest_volumes(particles: ParticleSystem, config: SimConfig,
                          cap_to_cell: bool = True) -> np.ndarray:
    """Per-particle rest volume from the grid mass density the scene itself
    induces (V = m / rho). Updates particles.volume0 in place and returns it."""
    grid = Grid(config)
    from .mpm import p2g  # deferred; mpm imports core only
    p2g(particles, grid)
    rho = np.empty(particles.n)
    K.sample_density_kernel(grid.mass, particles.position, DOMAIN_MIN,
                            config.dx, config.spline_degree, rho)
    rho = np.maximum(rho, 1e-300)
    vol = particles.mass / rho
    if cap_to_cell:
        vol = np.minimum(vol, config.dx ** 3)
    particles.volume0 = vol
    return vol
