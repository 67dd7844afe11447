"""Manipulation drives: convert 3D trajectories into time-varying grid
velocity overrides, the external-force surrogate for tool-tissue contact."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import _kernels as K
from .core import DOMAIN_MIN, Grid, ParticleSystem, SceneError, Trajectory


def select_region(particles: ParticleSystem, p0, radius: float) -> np.ndarray:
    """Indices of all particles within radius of p0 (at the current
    positions). The returned tags persist as the particles advect."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    p0 = np.asarray(p0, dtype=np.float64).reshape(3)
    d2 = np.sum((particles.position - p0) ** 2, axis=1)
    idx = np.nonzero(d2 <= radius * radius)[0]
    if idx.size == 0:
        raise SceneError("drive region is empty: trajectory misses the tissue")
    return idx.astype(np.int64)


def drive_velocity(trajectory: Trajectory, t: float,
                   frame_dt: float) -> Optional[np.ndarray]:
    """Piecewise-constant drive velocity at sim time t, or None once the
    trajectory has ended (free rebound).

    Between stored frames a and b the velocity is (p_b - p_a) over the
    spanned time (b - a) * frame_dt.
    """
    if t < 0:
        raise ValueError("sim time must be >= 0")
    frames = trajectory.frames
    t0 = frames[0] * frame_dt
    t_end = frames[-1] * frame_dt
    if t < t0 or t >= t_end:
        return None
    # segment containing t: frames[s]*frame_dt <= t < frames[s+1]*frame_dt
    s = int(np.searchsorted(frames * frame_dt, t, side="right")) - 1
    s = min(max(s, 0), frames.shape[0] - 2)
    span = (frames[s + 1] - frames[s]) * frame_dt
    return (trajectory.points[s + 1] - trajectory.points[s]) / span


def drive_nodes(grid: Grid, particles: ParticleSystem,
                tagged_indices: np.ndarray,
                velocity: Optional[np.ndarray]) -> Grid:
    """Flag every grid node inside the B-spline support of a tagged particle
    and accumulate the drive velocity there (grid_update averages overlapping
    drives). velocity None clears nothing and flags nothing."""
    if velocity is None:
        return grid
    cfg = grid.config
    vel = np.asarray(velocity, dtype=np.float64).reshape(3)
    idx = np.asarray(tagged_indices, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        return grid
    K.drive_nodes_kernel(particles.position, idx, vel,
                         grid.drive_vel_sum, grid.drive_count,
                         DOMAIN_MIN, cfg.dx, cfg.spline_degree,
                         cfg.nodes_per_axis)
    grid._has_drive = True
    # drive stencils sit inside the particle stencil box; extend dirty anyway
    pmin = particles.position[idx].min(axis=0)
    pmax = particles.position[idx].max(axis=0)
    shift = 0.5 if cfg.spline_degree == 2 else 1.0
    lo = np.floor((pmin - DOMAIN_MIN) / cfg.dx - shift).astype(np.int64)
    hi = (np.floor((pmax - DOMAIN_MIN) / cfg.dx - shift).astype(np.int64)
          + cfg.spline_degree + 2)
    m = cfg.nodes_per_axis
    grid.mark_dirty(np.clip(lo, 0, m), np.clip(hi, 0, m))
    return grid


class TrajectoryDrive:
    """Drive protocol implementation binding a trajectory to a tagged region.

    Tag the region once on the undeformed scene; the tagged particles are
    then tracked Lagrangian-style, so the grip follows the tissue.
    """

    def __init__(self, trajectory: Trajectory, particles: ParticleSystem,
                 frame_dt: float, radius: Optional[float] = None):
        self.trajectory = trajectory
        self.frame_dt = frame_dt
        r = radius if radius is not None else trajectory.region_radius
        self.tagged_indices = select_region(particles, trajectory.start_point, r)

    def velocity_at(self, t: float) -> Optional[np.ndarray]:
        return drive_velocity(self.trajectory, t, self.frame_dt)

    @property
    def end_time(self) -> float:
        return self.trajectory.last_frame * self.frame_dt
