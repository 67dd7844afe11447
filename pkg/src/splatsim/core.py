"""Core domain types shared by the simulation, rendering and estimation layers.

Everything here is a plain value type: numpy arrays wrapped in small classes
with explicit copy semantics and no hidden mutation. The particle store is
struct-of-arrays; a "particle" is a row index into it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

# Simulation domain: axis-aligned cube of side 2 centered at the origin.
DOMAIN_MIN = -1.0
DOMAIN_MAX = 1.0
DOMAIN_SIDE = 2.0

# Bit flags for grid nodes.
FLAG_BOUNDARY = 1
FLAG_DRIVE = 2

STICKY = "sticky"
SLIP = "slip"

# Face order used for per-face boundary conditions.
FACES = ("-x", "+x", "-y", "+y", "-z", "+z")


class SceneError(ValueError):
    """Scene content is structurally unusable (bad fields, bad file)."""


class SimulationError(RuntimeError):
    """Runtime failure inside the stepping loop (CFL violation, inversion, NaN)."""


def lame_from_young_poisson(young: float, poisson: float) -> tuple[float, float]:
    """Convert Young's modulus and Poisson ratio to (shear, Lame) moduli.

    mu = E / (2 (1 + nu)),  lam = E nu / ((1 + nu)(1 - 2 nu)).

    Raises ValueError for nu outside [0, 0.5) (the incompressible limit is
    singular) or for non-positive E.
    """
    if young <= 0.0:
        raise ValueError(f"Young's modulus must be positive, got {young}")
    if not (0.0 <= poisson < 0.5):
        raise ValueError(f"Poisson ratio must be in [0, 0.5), got {poisson}")
    mu = young / (2.0 * (1.0 + poisson))
    lam = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    return mu, lam


def young_from_lame(mu: float, lam: float) -> float:
    """Inverse of lame_from_young_poisson: E = mu (3 lam + 2 mu) / (lam + mu)."""
    if mu <= 0.0 or lam < 0.0:
        raise ValueError("need mu > 0 and lam >= 0")
    return mu * (3.0 * lam + 2.0 * mu) / (lam + mu)


@dataclass
class MaterialField:
    """Per-particle physical parameters plus the cluster partition used by
    inverse estimation. All arrays share the particle count."""

    mu_E: np.ndarray      # shear modulus, > 0
    lam_E: np.ndarray     # Lame modulus, > 0
    eta_v: np.ndarray     # viscosity, >= 0
    gamma_v: np.ndarray   # viscous flow rate, >= 0, dimensionless
    cluster_id: np.ndarray
    cluster_count: int = 1

    @classmethod
    def uniform(cls, n: int, young: float = 1.0e4, poisson: float = 0.45,
                eta_v: float = 0.0, gamma_v: float = 0.0) -> "MaterialField":
        mu, lam = lame_from_young_poisson(young, poisson)
        return cls(
            mu_E=np.full(n, mu),
            lam_E=np.full(n, lam),
            eta_v=np.full(n, float(eta_v)),
            gamma_v=np.full(n, float(gamma_v)),
            cluster_id=np.zeros(n, dtype=np.int64),
            cluster_count=1,
        )

    def copy(self) -> "MaterialField":
        return MaterialField(self.mu_E.copy(), self.lam_E.copy(),
                             self.eta_v.copy(), self.gamma_v.copy(),
                             self.cluster_id.copy(), self.cluster_count)

    def set_cluster(self, cid: int, *, mu_E: Optional[float] = None,
                    lam_E: Optional[float] = None, eta_v: Optional[float] = None,
                    gamma_v: Optional[float] = None) -> None:
        sel = self.cluster_id == cid
        if mu_E is not None:
            self.mu_E[sel] = mu_E
        if lam_E is not None:
            self.lam_E[sel] = lam_E
        if eta_v is not None:
            self.eta_v[sel] = eta_v
        if gamma_v is not None:
            self.gamma_v[sel] = gamma_v

    def cluster_values(self, name: str) -> np.ndarray:
        """Representative value per cluster (first particle of each cluster)."""
        arr = getattr(self, name)
        out = np.empty(self.cluster_count)
        for c in range(self.cluster_count):
            sel = np.nonzero(self.cluster_id == c)[0]
            out[c] = arr[sel[0]] if sel.size else np.nan
        return out

    def validate(self) -> list[str]:
        issues = []
        if np.any(self.mu_E <= 0):
            issues.append("non-positive shear modulus")
        if np.any(self.lam_E <= 0):
            issues.append("non-positive Lame modulus")
        if np.any(self.eta_v < 0):
            issues.append("negative viscosity")
        if np.any(self.gamma_v < 0):
            issues.append("negative viscous flow rate")
        if self.cluster_id.size and (self.cluster_id.min() < 0
                                     or self.cluster_id.max() >= self.cluster_count):
            issues.append("cluster_id out of range")
        return issues


class ParticleSystem:
    """Struct-of-arrays particle store.

    Each particle carries simulation state (position, velocity, mass, rest
    volume, elastic/viscous deformation gradients, APIC affine matrix),
    splat render attributes (opacity, rotation quaternion wxyz, scale, color)
    and a reference into a MaterialField.
    """

    SIM_FIELDS = ("position", "velocity", "mass", "volume0",
                  "F_E", "F_v", "C", "R_polar")
    RENDER_FIELDS = ("opacity", "rotation", "scale", "color")

    def __init__(self, position, velocity=None, mass=None, volume0=None,
                 F_E=None, F_v=None, C=None, opacity=None, rotation=None,
                 scale=None, color=None, material: Optional[MaterialField] = None,
                 R_polar=None):
        position = np.ascontiguousarray(position, dtype=np.float64).reshape(-1, 3)
        n = position.shape[0]
        self.position = position
        self.velocity = _arr(velocity, (n, 3), 0.0)
        self.mass = _arr(mass, (n,), 1.0)
        self.volume0 = _arr(volume0, (n,), 1.0)
        self.F_E = _eye_batch(F_E, n)
        self.F_v = _eye_batch(F_v, n)
        self.C = _arr(C, (n, 3, 3), 0.0)
        self.opacity = _arr(opacity, (n,), 1.0)
        self.rotation = _arr(rotation, (n, 4), None)
        if rotation is None:
            self.rotation[:] = 0.0
            self.rotation[:, 0] = 1.0
        self.scale = _arr(scale, (n, 3), 0.01)
        self.color = _arr(color, (n, 3), 0.5)
        self.material = material if material is not None else MaterialField.uniform(n)
        self.R_polar = _eye_batch(R_polar, n)

    @property
    def n(self) -> int:
        return self.position.shape[0]

    def copy(self) -> "ParticleSystem":
        ps = ParticleSystem.__new__(ParticleSystem)
        for name in self.SIM_FIELDS + self.RENDER_FIELDS:
            setattr(ps, name, getattr(self, name).copy())
        ps.material = self.material.copy()
        return ps

    def total_mass(self) -> float:
        return float(np.sum(self.mass))

    def total_momentum(self) -> np.ndarray:
        return np.sum(self.mass[:, None] * self.velocity, axis=0)

    def field_equal(self, other: "ParticleSystem") -> bool:
        if self.n != other.n:
            return False
        for name in self.SIM_FIELDS + self.RENDER_FIELDS:
            if not np.array_equal(getattr(self, name), getattr(other, name)):
                return False
        for name in ("mu_E", "lam_E", "eta_v", "gamma_v", "cluster_id"):
            if not np.array_equal(getattr(self.material, name),
                                  getattr(other.material, name)):
                return False
        return True


def _arr(value, shape, fill):
    if value is None:
        out = np.empty(shape, dtype=np.float64)
        if fill is not None:
            out[...] = fill
        return out
    out = np.ascontiguousarray(value, dtype=np.float64)
    if out.shape != shape:
        out = out.reshape(shape)
    return out


def _eye_batch(value, n):
    if value is None:
        out = np.zeros((n, 3, 3), dtype=np.float64)
        out[:, 0, 0] = out[:, 1, 1] = out[:, 2, 2] = 1.0
        return out
    return np.ascontiguousarray(value, dtype=np.float64).reshape(n, 3, 3)


@dataclass(frozen=True)
class SimConfig:
    """Integrator configuration. The domain is the fixed 2-unit cube.

    dt is the simulation step, frame_dt the video frame duration; the default
    pairing (1e-4 s, 0.04 s) makes 10,000 steps one second of 25 fps video.
    """

    grid_resolution: int = 50
    dt: float = 1.0e-4
    frame_dt: float = 0.04
    spline_degree: int = 2
    boundary: tuple[str, ...] = (SLIP, SLIP, SLIP, SLIP, STICKY, SLIP)
    boundary_layers: int = 2
    drive_radius: Optional[float] = None   # defaults to 3 grid cells
    poisson_nu: float = 0.45
    mass_epsilon_rel: float = 1.0e-12
    grad_v_limit: float = 0.5              # stability guard on dt*|grad v|

    def __post_init__(self):
        if self.grid_resolution < 8:
            raise ValueError("grid_resolution must be >= 8")
        if self.dt <= 0 or self.frame_dt <= 0:
            raise ValueError("dt and frame_dt must be positive")
        if self.dt > self.frame_dt:
            raise ValueError("dt must not exceed frame_dt")
        if self.spline_degree not in (2, 3):
            raise ValueError("spline_degree must be 2 or 3")
        if len(self.boundary) != 6 or any(b not in (STICKY, SLIP) for b in self.boundary):
            raise ValueError("boundary must give sticky|slip for the 6 faces "
                             "in order -x,+x,-y,+y,-z,+z")

    @property
    def dx(self) -> float:
        return DOMAIN_SIDE / self.grid_resolution

    @property
    def nodes_per_axis(self) -> int:
        return self.grid_resolution + 1

    @property
    def steps_per_frame(self) -> int:
        return int(round(self.frame_dt / self.dt))

    @property
    def effective_drive_radius(self) -> float:
        return self.drive_radius if self.drive_radius is not None else 3.0 * self.dx

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


class Grid:
    """Eulerian scratch field of node masses, momenta and velocities.

    Node (i,j,k) sits at DOMAIN_MIN + (i,j,k)*dx; there are resolution+1
    nodes per axis so the domain faces carry nodes exactly.
    """

    def __init__(self, config: SimConfig):
        m = config.nodes_per_axis
        self.config = config
        self.mass = np.zeros((m, m, m))
        self.momentum = np.zeros((m, m, m, 3))
        self.velocity = np.zeros((m, m, m, 3))
        self.force = np.zeros((m, m, m, 3))
        self.flags = np.zeros((m, m, m), dtype=np.uint8)
        # accumulated drive velocity and cover count, averaged at override time
        self.drive_vel_sum = np.zeros((m, m, m, 3))
        self.drive_count = np.zeros((m, m, m), dtype=np.int32)
        # zero-mass gate, set by p2g from the mean particle mass
        self._mass_eps: Optional[float] = None
        # node box [lo, hi) that kernels have written; None = whole grid
        self._dirty: Optional[tuple[np.ndarray, np.ndarray]] = None
        self._has_drive = False

    def mark_dirty(self, lo, hi) -> None:
        lo = np.asarray(lo, dtype=np.int64)
        hi = np.asarray(hi, dtype=np.int64)
        if self._dirty is None:
            self._dirty = (lo, hi)
        else:
            plo, phi = self._dirty
            self._dirty = (np.minimum(plo, lo), np.maximum(phi, hi))

    def dirty_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self._dirty is None:
            m = self.config.nodes_per_axis
            return np.zeros(3, dtype=np.int64), np.full(3, m, dtype=np.int64)
        return self._dirty

    def clear(self) -> None:
        """Zero the written node box (everything outside it is already zero)."""
        if self._dirty is None:
            sl = (slice(None), slice(None), slice(None))
        else:
            lo, hi = self._dirty
            sl = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
        self.mass[sl] = 0.0
        self.momentum[sl] = 0.0
        self.velocity[sl] = 0.0
        self.force[sl] = 0.0
        self.flags[sl] = 0
        if self._has_drive:
            self.drive_vel_sum[sl] = 0.0
            self.drive_count[sl] = 0
        self._dirty = None
        self._has_drive = False

    def node_positions(self) -> np.ndarray:
        m = self.config.nodes_per_axis
        ax = DOMAIN_MIN + np.arange(m) * self.config.dx
        gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def total_mass(self) -> float:
        return float(np.sum(self.mass))

    def total_momentum(self) -> np.ndarray:
        return self.momentum.reshape(-1, 3).sum(axis=0)


@dataclass
class Trajectory:
    """Time-stamped 3D path of one manipulation point.

    frame_index values are strictly increasing; the drive velocity between
    stored frames is the finite difference over the spanned frame interval.
    """

    frames: np.ndarray           # (M,) int frame indices
    points: np.ndarray           # (M,3) positions
    region_radius: float = 0.12

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.frames.shape[0] != self.points.shape[0]:
            raise ValueError("frames and points length mismatch")
        if self.frames.shape[0] < 2:
            raise ValueError("trajectory needs at least 2 frames")
        if np.any(np.diff(self.frames) <= 0):
            raise ValueError("trajectory frame indices must be strictly increasing")
        if self.region_radius <= 0:
            raise ValueError("region_radius must be positive")

    @property
    def start_point(self) -> np.ndarray:
        return self.points[0]

    @property
    def last_frame(self) -> int:
        return int(self.frames[-1])


@dataclass
class Camera:
    """Pinhole camera. Pose is stored as (R, center): camera-space coords are
    R @ (p - center), so shifting scene and camera together cancels exactly."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 1.0e-3

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near <= 0:
            raise ValueError("near plane must be positive")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) @ self.R.T

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R + self.center

    def shifted(self, offset) -> "Camera":
        """Same camera with its optical center moved by a world offset."""
        off = np.asarray(offset, dtype=np.float64).reshape(3)
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width,
                      self.height, self.R.copy(), self.center + off, self.near)

    @classmethod
    def front_view(cls, width: int = 256, height: int = 256,
                   distance: float = 3.0, fov_deg: float = 45.0) -> "Camera":
        """Camera on the -z axis looking toward +z at the domain center."""
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height, R=np.eye(3),
                   center=np.array([0.0, 0.0, -distance]), near=1e-3)


@dataclass
class ObservationSet:
    """Per-frame target images and masks plus the shared camera."""

    frame_indices: np.ndarray    # (T,) int
    images: np.ndarray           # (T,H,W,3) float in [0,1]
    masks: np.ndarray            # (T,H,W) bool
    camera: Camera

    def __post_init__(self):
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64).reshape(-1)
        self.images = np.asarray(self.images, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError("images must be (T,H,W,3)")
        if self.masks.shape != self.images.shape[:3]:
            raise ValueError("masks must align with images")
        if self.frame_indices.shape[0] != self.images.shape[0]:
            raise ValueError("frame_indices length mismatch")

    @property
    def n_frames(self) -> int:
        return int(self.frame_indices.shape[0])


def validate_scene(particles: ParticleSystem, config: SimConfig) -> list[str]:
    """Diagnostic invariant check; returns a list of violations (empty when
    the scene is simulation-ready)."""
    issues: list[str] = []
    n = particles.n
    if n == 0:
        return ["empty scene"]
    pos = particles.position
    if np.any(~np.isfinite(pos)):
        issues.append("non-finite positions")
    else:
        bad = np.any((pos < DOMAIN_MIN) | (pos > DOMAIN_MAX), axis=1)
        if np.any(bad):
            issues.append(f"position outside domain for {int(bad.sum())} particle(s)")
    if np.any(~np.isfinite(particles.velocity)):
        issues.append("non-finite velocities")
    if np.any(particles.mass <= 0):
        issues.append("non-positive mass")
    if np.any(particles.volume0 <= 0):
        issues.append("non-positive rest volume")
    detE = np.linalg.det(particles.F_E)
    detV = np.linalg.det(particles.F_v)
    if np.any(detE <= 0):
        issues.append("degenerate elastic deformation gradient (det <= 0)")
    if np.any(detV <= 0):
        issues.append("degenerate viscous deformation gradient (det <= 0)")
    qn = np.linalg.norm(particles.rotation, axis=1)
    if np.any(np.abs(qn - 1.0) > 1e-6):
        issues.append("non-unit rotation quaternion")
    if np.any((particles.opacity < 0) | (particles.opacity > 1)):
        issues.append("opacity outside [0,1]")
    if np.any(particles.scale <= 0):
        issues.append("non-positive splat scale")
    issues.extend(particles.material.validate())
    if particles.material.mu_E.shape[0] != n:
        issues.append("material field size mismatch")
    return issues
