"""Visco-elastic MPM integrator: APIC transfers, constitutive models, grid
update and advection.

One step runs p2g -> grid_update -> g2p -> update_deformation -> advection,
with drive-region velocity overrides applied on the grid. All hot loops live
in _kernels.py; every kernel is serial, so two runs on identical inputs give
bit-identical trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .core import (DOMAIN_MIN, Grid, ParticleSystem, SimConfig, SimulationError,
                   SLIP)


@dataclass
class StepDiagnostics:
    """Post-step conserved-quantity summary."""

    total_mass: float
    total_momentum: np.ndarray
    max_velocity: float
    active_nodes: int


class Drive:
    """Protocol: something with tagged_indices and velocity_at(sim_time)."""

    tagged_indices: np.ndarray

    def velocity_at(self, t: float) -> Optional[np.ndarray]:
        raise NotImplementedError


def _raise_status(status) -> None:
    code, idx = int(status[0]), int(status[1])
    if code == K.OK:
        return
    if code == K.ERR_NAN:
        raise SimulationError(f"NaN in state of particle {idx}")
    if code == K.ERR_INVERTED:
        raise SimulationError(f"inverted element at particle {idx} (det F <= 0)")
    if code == K.ERR_GRADV:
        raise SimulationError(f"velocity-gradient guard tripped at particle {idx}")
    if code == K.ERR_STENCIL:
        raise SimulationError(f"particle {idx} too close to the domain edge "
                              "(B-spline stencil clipped)")
    raise SimulationError(f"kernel status {code} at particle {idx}")


def bspline_weights(position, dx: float, degree: int = 2,
                    origin: float = DOMAIN_MIN, nodes: Optional[int] = None):
    """Per-axis B-spline weights and gradients over the (degree+1) support
    nodes of one position.

    Returns (weights, grads, base): weights/grads are (degree+1, 3) with
    grads in world units; base is the lowest support node index per axis.
    Raises SimulationError when the stencil would clip the domain edge.
    """
    position = np.asarray(position, dtype=np.float64).reshape(3)
    if nodes is None:
        nodes = int(round(2.0 / dx)) + 1
    sup = degree + 1
    w = np.empty((sup, 3))
    dw = np.empty((sup, 3))
    base = np.empty(3, dtype=np.int64)
    code = K.bspline_weights_kernel(position, origin, dx, degree, nodes, w, dw, base)
    if code != K.OK:
        raise SimulationError("position too close to the domain edge "
                              "(B-spline stencil clipped)")
    return w, dw, base


def mass_epsilon(particles: ParticleSystem, config: SimConfig) -> float:
    return config.mass_epsilon_rel * float(np.mean(particles.mass))


def affine_prefactor(dx: float, degree: int) -> float:
    """APIC affine scale 12 / (dx^2 (b+1)); 4/dx^2 for the quadratic kernel."""
    return 12.0 / (dx * dx * (degree + 1))


def p2g(particles: ParticleSystem, grid: Grid, dt: Optional[float] = None) -> Grid:
    """Scatter mass, APIC momentum and internal stress forces to the grid.

    The grid must be cleared beforehand. dt is unused here (forces are scaled
    during grid_update) and kept for call-site symmetry.
    """
    cfg = grid.config
    grid._mass_eps = mass_epsilon(particles, cfg)
    if particles.n:
        # stencil bounding box (with margin) so clear() can stay local
        pmin = particles.position.min(axis=0)
        pmax = particles.position.max(axis=0)
        if np.all(np.isfinite(pmin)) and np.all(np.isfinite(pmax)):
            shift = 0.5 if cfg.spline_degree == 2 else 1.0
            lo = np.floor((pmin - DOMAIN_MIN) / cfg.dx - shift).astype(np.int64) - 1
            hi = (np.floor((pmax - DOMAIN_MIN) / cfg.dx - shift).astype(np.int64)
                  + cfg.spline_degree + 3)
            m = cfg.nodes_per_axis
            grid.mark_dirty(np.clip(lo, 0, m), np.clip(hi, 0, m))
        else:
            grid.mark_dirty([0, 0, 0], [cfg.nodes_per_axis] * 3)
    status = np.zeros(2, dtype=np.int64)
    mat = particles.material
    K.p2g_kernel(particles.position, particles.velocity, particles.mass,
                 particles.volume0, particles.F_E, particles.F_v, particles.C,
                 particles.R_polar,
                 mat.mu_E, mat.lam_E, mat.eta_v,
                 grid.mass, grid.momentum, grid.force,
                 DOMAIN_MIN, cfg.dx, cfg.spline_degree, status)
    _raise_status(status)
    return grid


def grid_update(grid: Grid, dt: float, config: SimConfig,
                drive: Optional[tuple[np.ndarray, np.ndarray]] = None) -> Grid:
    """Momentum to velocity with force increment, then drive overrides and
    boundary conditions.

    drive, when given, is (node_index_array (M,3) or boolean mask, velocity);
    those nodes are overridden with the drive velocity exactly. Drives staged
    through motion.drive_nodes are applied the same way.
    """
    if drive is not None:
        nodes, vel = drive
        vel = np.asarray(vel, dtype=np.float64).reshape(3)
        if nodes.dtype == bool:
            idx = np.argwhere(nodes).astype(np.int64)
        else:
            idx = np.asarray(nodes, dtype=np.int64).reshape(-1, 3)
        if idx.shape[0]:
            grid.drive_vel_sum[idx[:, 0], idx[:, 1], idx[:, 2]] += vel
            grid.drive_count[idx[:, 0], idx[:, 1], idx[:, 2]] += 1
            grid.mark_dirty(idx.min(axis=0), idx.max(axis=0) + 1)
            grid._has_drive = True
    bc_codes = np.array([0 if b == "sticky" else 1 for b in config.boundary],
                        dtype=np.int64)
    eps = grid._mass_eps
    if eps is None:
        nz = grid.mass[grid.mass > 0]
        eps = config.mass_epsilon_rel * (float(nz.mean()) if nz.size else 1.0)
    lo, hi = grid.dirty_box()
    K.grid_update_kernel(grid.mass, grid.momentum, grid.force, grid.velocity,
                         grid.flags, grid.drive_vel_sum, grid.drive_count,
                         dt, eps, bc_codes, config.boundary_layers,
                         lo[0], lo[1], lo[2], hi[0], hi[1], hi[2],
                         grid._has_drive)
    return grid


def g2p(grid: Grid, particles: ParticleSystem, config: SimConfig) -> ParticleSystem:
    """Gather grid velocities into particle velocity and affine matrix."""
    status = np.zeros(2, dtype=np.int64)
    K.g2p_kernel(grid.velocity, particles.position, particles.velocity,
                 particles.C, DOMAIN_MIN, config.dx, config.spline_degree, status)
    _raise_status(status)
    return particles


def polar_rotation(F: np.ndarray) -> np.ndarray:
    """Proper rotation factor of F via SVD (R = U V^T with det corrections)."""
    F = np.asarray(F, dtype=np.float64)
    single = F.ndim == 2
    Fb = F.reshape(-1, 3, 3)
    U, _, Vt = np.linalg.svd(Fb)
    R = U @ Vt
    neg = np.linalg.det(R) < 0
    if np.any(neg):
        U = U.copy()
        U[neg, :, 2] *= -1.0
        R = U @ Vt
    return R[0] if single else R


def refresh_polar(particles: ParticleSystem) -> None:
    """Recompute the cached polar rotations after direct F_E edits."""
    K.polar_batch(particles.F_E, particles.R_polar)


def corotated_energy(F_E, mu, lam):
    """Fixed corotated strain energy density."""
    F = np.asarray(F_E, dtype=np.float64)
    single = F.ndim == 2
    Fb = F.reshape(-1, 3, 3)
    s = np.linalg.svd(Fb, compute_uv=False)
    J = np.linalg.det(Fb)
    psi = mu * np.sum((s - 1.0) ** 2, axis=-1) + 0.5 * lam * (J - 1.0) ** 2
    return float(psi[0]) if single else psi


def corotated_piola(F_E, mu, lam):
    """First Piola-Kirchhoff stress of the fixed corotated energy:
    P = 2 mu (F - R) + lam (J - 1) J F^-T."""
    F = np.asarray(F_E, dtype=np.float64)
    single = F.ndim == 2
    Fb = F.reshape(-1, 3, 3)
    R = polar_rotation(Fb)
    J = np.linalg.det(Fb)
    FinvT = np.transpose(np.linalg.inv(Fb), (0, 2, 1))
    mu_b = np.broadcast_to(np.asarray(mu, dtype=np.float64), J.shape)
    lam_b = np.broadcast_to(np.asarray(lam, dtype=np.float64), J.shape)
    P = (2.0 * mu_b[:, None, None] * (Fb - R)
         + (lam_b * (J - 1.0) * J)[:, None, None] * FinvT)
    return P[0] if single else P


def corotated_stress(F_E, mu, lam):
    """Cauchy stress of fixed corotated elasticity,
    sigma = (1/J) P F^T = (2 mu / J)(F - R) F^T + lam (J - 1) I.

    Raises SimulationError on det(F) <= 0, carrying the offending index.
    """
    F = np.asarray(F_E, dtype=np.float64)
    single = F.ndim == 2
    Fb = F.reshape(-1, 3, 3)
    J = np.linalg.det(Fb)
    if np.any(J <= 0.0):
        idx = int(np.argmax(J <= 0.0))
        raise SimulationError(f"inverted element at particle {idx} (det F <= 0)")
    R = polar_rotation(Fb)
    mu_b = np.broadcast_to(np.asarray(mu, dtype=np.float64), J.shape)
    lam_b = np.broadcast_to(np.asarray(lam, dtype=np.float64), J.shape)
    sig = (2.0 * mu_b / J)[:, None, None] * ((Fb - R) @ np.transpose(Fb, (0, 2, 1)))
    iso = lam_b * (J - 1.0)
    sig[:, 0, 0] += iso
    sig[:, 1, 1] += iso
    sig[:, 2, 2] += iso
    return sig[0] if single else sig


def viscous_stress(F_v, D, eta):
    """Viscous Cauchy stress sigma = det(F_v) * 2 eta D."""
    F = np.asarray(F_v, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    single = F.ndim == 2
    Fb = F.reshape(-1, 3, 3)
    Db = D.reshape(-1, 3, 3)
    J = np.linalg.det(Fb)
    eta_b = np.broadcast_to(np.asarray(eta, dtype=np.float64), J.shape)
    sig = (J * 2.0 * eta_b)[:, None, None] * Db
    return sig[0] if single else sig


def apply_velocity_gradient(F_E, F_v, grad_v, gamma, dt):
    """Pure-numpy reference for one deformation update:
    F_E' = F_E (I + dt grad_v),  F_v' = F_v (I + gamma dt D), D = sym(grad_v)."""
    grad_v = np.asarray(grad_v, dtype=np.float64)
    D = 0.5 * (grad_v + grad_v.T)
    I = np.eye(3)
    return F_E @ (I + dt * grad_v), F_v @ (I + gamma * dt * D)


def update_deformation(particles: ParticleSystem, dt: float, config: SimConfig,
                       update_rotation: bool = True) -> ParticleSystem:
    """Advance F_E and F_v using each particle's affine matrix as the local
    velocity gradient; optionally co-rotate the splat quaternion by the
    incremental rotation of F_E's polar factor."""
    status = np.zeros(2, dtype=np.int64)
    K.deformation_update_kernel(particles.F_E, particles.F_v, particles.C,
                                particles.R_polar, particles.rotation,
                                particles.material.gamma_v, dt,
                                config.grad_v_limit, update_rotation, status)
    _raise_status(status)
    return particles


def step(particles: ParticleSystem, config: SimConfig,
         drives: Sequence[Drive] = (), sim_time: float = 0.0,
         grid: Optional[Grid] = None) -> StepDiagnostics:
    """Advance the scene by one dt in place and return diagnostics."""
    from .motion import drive_nodes  # local import to avoid a cycle

    if grid is None:
        grid = Grid(config)
    else:
        grid.clear()
    p2g(particles, grid)
    for d in drives:
        v = d.velocity_at(sim_time)
        if v is not None:
            drive_nodes(grid, particles, d.tagged_indices, v)
    grid_update(grid, config.dt, config)
    g2p(grid, particles, config)
    vmax = float(np.sqrt(np.max(np.sum(particles.velocity ** 2, axis=1))))
    if config.dt * vmax >= config.dx:
        raise SimulationError(
            f"CFL violation: dt*|v|max = {config.dt * vmax:.3e} >= dx = {config.dx:.3e}")
    update_deformation(particles, config.dt, config)
    particles.position += config.dt * particles.velocity
    lo, hi = grid.dirty_box()
    active = grid.mass[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    return StepDiagnostics(
        total_mass=particles.total_mass(),
        total_momentum=particles.total_momentum(),
        max_velocity=vmax,
        active_nodes=int(np.count_nonzero(active > grid._mass_eps)),
    )


def run(particles: ParticleSystem, config: SimConfig,
        drives: Sequence[Drive] = (), n_steps: int = 0,
        frame_stride: int = 400, start_time: float = 0.0,
        collect_diagnostics: bool = False):
    """Run n_steps from start_time, snapshotting every frame_stride steps
    (plus the final step when it is not stride-aligned). n_steps = 0 yields
    a single snapshot equal to the input.

    Returns the snapshot list, or (snapshots, diagnostics) when
    collect_diagnostics is set; diagnostics carries one entry per snapshot.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    if frame_stride < 1:
        raise ValueError("frame_stride must be >= 1")
    snaps: list[ParticleSystem] = []
    diags: list[StepDiagnostics] = []
    grid = Grid(config)
    if n_steps == 0:
        snaps.append(particles.copy())
        if collect_diagnostics:
            diags.append(StepDiagnostics(particles.total_mass(),
                                         particles.total_momentum(),
                                         float(np.sqrt(np.max(np.sum(
                                             particles.velocity ** 2, axis=1)))) if particles.n else 0.0,
                                         0))
            return snaps, diags
        return snaps
    diag = None
    for s in range(1, n_steps + 1):
        t = start_time + (s - 1) * config.dt
        try:
            diag = step(particles, config, drives, sim_time=t, grid=grid)
        except SimulationError as exc:
            raise SimulationError(f"step {s}: {exc}") from exc
        if s % frame_stride == 0 or s == n_steps:
            snaps.append(particles.copy())
            if collect_diagnostics:
                diags.append(diag)
    if collect_diagnostics:
        return snaps, diags
    return snaps
