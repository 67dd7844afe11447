"""Trajectory and anisotropy regularization, plus a gradient-descent
refinement of noisy trajectory bundles.

Neighboring tracked points on tissue move almost in parallel over short
times; the losses here score deviations from that and the refiner minimizes
a data + smoothness objective over all frames at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .scene_prep import knn


class ConvergenceError(RuntimeError):
    """Refinement could not find a descending step."""


@dataclass
class TrajectoryBundle:
    """N tracked points over T frames plus neighbor sets on frame 0."""

    points: np.ndarray            # (T, N, 3)
    neighbors: Optional[np.ndarray] = None   # (N, k) indices

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[2] != 3:
            raise ValueError("points must be (T, N, 3)")

    @property
    def n_frames(self) -> int:
        return self.points.shape[0]

    @property
    def n_points(self) -> int:
        return self.points.shape[1]

    def with_neighbors(self, k: int) -> "TrajectoryBundle":
        kk = min(k, self.n_points - 1)
        nb = knn(self.points[0], kk) if kk >= 1 else None
        return TrajectoryBundle(self.points, nb)

    def displacements(self, t: int) -> np.ndarray:
        if t < 1 or t >= self.n_frames:
            raise ValueError(f"t must be in [1, {self.n_frames - 1}]")
        return self.points[t] - self.points[t - 1]


def _require_neighbors(bundle: TrajectoryBundle) -> np.ndarray:
    if bundle.neighbors is None:
        raise ValueError("bundle has no neighbor sets; call with_neighbors(k)")
    return bundle.neighbors


def traj_loss_paper(bundle: TrajectoryBundle, t: int) -> float:
    """Sum over unordered neighbor pairs of displacement dot products,
    sum_i sum_{j<k in N_i} d_j . d_k.

    Small when neighborhood motion is short; can go negative for
    anti-parallel motion (see traj_loss_relative for the descent surrogate).
    """
    nb = _require_neighbors(bundle)
    d = bundle.displacements(t)
    g = d[nb]                        # (N, k, 3)
    s = g.sum(axis=1)                # sum of displacements per set
    sq = (g * g).sum(axis=(1, 2))    # sum of squared norms per set
    # sum_{j<k} d_j.d_k = (|sum|^2 - sum|d|^2) / 2 per set
    return float(0.5 * ((s * s).sum() - sq.sum()))


def traj_loss_relative(bundle: TrajectoryBundle, t: int) -> float:
    """Nonnegative variant, sum_i sum_{j<k in N_i} |d_j - d_k|^2; zero iff
    displacements agree within every neighbor set."""
    nb = _require_neighbors(bundle)
    d = bundle.displacements(t)
    g = d[nb]
    k = nb.shape[1]
    s = g.sum(axis=1)
    sq = (g * g).sum(axis=(1, 2))
    # sum_{j<k} |d_j - d_k|^2 = k sum|d|^2 - |sum|^2 per set
    return float((k * sq - (s * s).sum(axis=1)).sum())


def aniso_loss(scales: np.ndarray, r_max: float = 1.0,
               r_aniso: float = 3.0) -> float:
    """Penalty for oversized or overly anisotropic kernels:
    sum_i relu(max(S_i) - r_max) + relu(max(S_i)/min(S_i) - r_aniso)."""
    s = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    s_max = s.max(axis=1)
    s_min = s.min(axis=1)
    return float(np.maximum(s_max - r_max, 0.0).sum()
                 + np.maximum(s_max / s_min - r_aniso, 0.0).sum())


def _objective_and_grad(x: np.ndarray, obs: np.ndarray, nb: Optional[np.ndarray],
                        lam_data: float, lam_traj: float):
    """Objective lam_data |x-obs|^2 + lam_traj sum_t loss_relative, with its
    analytic gradient (both terms are quadratic in x)."""
    f = lam_data * float(((x - obs) ** 2).sum())
    grad = 2.0 * lam_data * (x - obs)
    if nb is not None and lam_traj > 0.0 and x.shape[0] >= 2:
        k = nb.shape[1]
        n = x.shape[1]
        cnt = np.zeros(n)
        np.add.at(cnt, nb.ravel(), 1.0)
        for t in range(1, x.shape[0]):
            d = x[t] - x[t - 1]
            g = d[nb]
            s = g.sum(axis=1)
            sq = (g * g).sum(axis=(1, 2))
            f += lam_traj * float((k * sq - (s * s).sum(axis=1)).sum())
            # d/d d_m = 2 k cnt_m d_m - 2 sum_{i: m in N_i} S_i
            ssum = np.zeros((n, 3))
            np.add.at(ssum, nb.ravel(), np.repeat(s, k, axis=0))
            gd = lam_traj * (2.0 * k * cnt[:, None] * d - 2.0 * ssum)
            grad[t] += gd
            grad[t - 1] -= gd
    return f, grad


def refine_trajectories(bundle: TrajectoryBundle, k: int = 8,
                        iterations: int = 200, lam_data: float = 1.0,
                        lam_traj: float = 1.0, step0: float = 1e-2,
                        max_backtracks: int = 40,
                        grad_tol: float = 1e-12) -> TrajectoryBundle:
    """Gradient descent with backtracking on the data + smoothness objective.

    The objective never increases across accepted steps; failure to find any
    descending step while the gradient is still large raises
    ConvergenceError.
    """
    if lam_data < 0 or lam_traj < 0:
        raise ValueError("loss weights must be nonnegative")
    obs = bundle.points
    n = bundle.n_points
    kk = min(k, n - 1)
    nb = bundle.neighbors
    if nb is None and kk >= 1:
        nb = knn(obs[0], kk)
    if nb is not None and nb.shape[1] < 1:
        nb = None
    x = obs.copy()
    f, grad = _objective_and_grad(x, obs, nb, lam_data, lam_traj)
    step = step0
    for _ in range(iterations):
        gnorm2 = float((grad * grad).sum())
        if gnorm2 <= grad_tol:
            break
        accepted = False
        for _bt in range(max_backtracks):
            cand = x - step * grad
            fc, gc = _objective_and_grad(cand, obs, nb, lam_data, lam_traj)
            if fc <= f - 1e-4 * step * gnorm2:
                x, f, grad = cand, fc, gc
                step *= 1.25
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if gnorm2 > 1e-8 * max(f, 1.0):
                raise ConvergenceError(
                    "no descending step found after "
                    f"{max_backtracks} backtracks (|grad|^2 = {gnorm2:.3e})")
            break
    return TrajectoryBundle(x, nb)


def save_bundle(path, bundle: TrajectoryBundle) -> None:
    """Plain-text table: header then one row per (frame, point_id, x, y, z)."""
    path = Path(path)
    T, N, _ = bundle.points.shape
    with open(path, "w") as fh:
        fh.write("frame point_id x y z\n")
        for t in range(T):
            for i in range(N):
                x, y, z = (float(v) for v in bundle.points[t, i])
                fh.write(f"{t} {i} {x!r} {y!r} {z!r}\n")


def load_bundle(path) -> TrajectoryBundle:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().split()
        if header != ["frame", "point_id", "x", "y", "z"]:
            raise ValueError(f"{path}: missing or malformed header line")
        rows = []
        for ln_no, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise ValueError(f"{path}:{ln_no}: expected 5 columns")
            rows.append((int(parts[0]), int(parts[1]),
                         float(parts[2]), float(parts[3]), float(parts[4])))
    if not rows:
        raise ValueError(f"{path}: no trajectory rows")
    frames = sorted({r[0] for r in rows})
    ids = sorted({r[1] for r in rows})
    if frames != list(range(len(frames))) or ids != list(range(len(ids))):
        raise ValueError(f"{path}: frames and point ids must be dense from 0")
    pts = np.full((len(frames), len(ids), 3), np.nan)
    for fr, pid, x, y, z in rows:
        pts[fr, pid] = (x, y, z)
    if np.any(np.isnan(pts)):
        raise ValueError(f"{path}: missing (frame, point) combinations")
    return TrajectoryBundle(pts)
