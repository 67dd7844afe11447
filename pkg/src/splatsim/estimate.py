"""Inverse estimation of per-cluster material parameters (shear modulus,
viscosity, viscous flow rate) by matching rendered simulation frames to
observed frames over rolling windows.

The optimizer is derivative-free coordinate descent on log parameters: each
iteration probes every (cluster, parameter) coordinate at +/- the current
step (central finite differences, two simulations per coordinate) and moves
to the lower side when it improves, shrinking the step otherwise. Accepted
moves never increase the window loss. Poisson ratio stays fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (MaterialField, ObservationSet, ParticleSystem, SimConfig,
                   SimulationError)
from .mpm import run
from .renderer import masked_l1, render
from .scene_prep import knn

PARAM_NAMES = ("mu_E", "eta_v", "gamma_v")

DEFAULT_BOUNDS = {
    "mu_E": (1.0e2, 1.0e6),
    "eta_v": (1.0e-2, 1.0e3),
    "gamma_v": (1.0e-3, 1.0e2),
}


@dataclass
class EstimationConfig:
    window_k: int = 25                 # frames per rolling round
    rounds: int = 2
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    fd_step: float = 0.25              # initial log-space probe step
    lam_tv: float = 1.0e-4
    cluster_count: int = 2
    tv_knn_k: int = 8
    iters_per_round: int = 8
    step_growth: float = 1.4
    step_min: float = 0.02
    step_max: float = 1.0
    poisson_nu: float = 0.45
    max_sims: Optional[int] = None

    def __post_init__(self):
        if self.window_k < 1:
            raise ValueError("window_k must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not (0.0 < self.fd_step < 0.5):
            raise ValueError("fd_step must lie in (0, 0.5)")
        if self.cluster_count < 1:
            raise ValueError("cluster_count must be >= 1")
        for name in PARAM_NAMES:
            lo, hi = self.bounds[name]
            if not (0 < lo < hi):
                raise ValueError(f"bounds for {name} must satisfy 0 < lo < hi")
        if self.lam_tv < 0:
            raise ValueError("lam_tv must be >= 0")


def cluster_particles(particles: ParticleSystem, cluster_count: int) -> np.ndarray:
    """Spatially coherent cluster labels via uniform grid binning of the
    initial positions; particles sorted by bin are cut into equal chunks.
    cluster_count equal to the particle count yields the identity labeling."""
    n = particles.n
    if cluster_count < 1:
        raise ValueError("cluster_count must be >= 1")
    if cluster_count > n:
        raise ValueError(f"cluster_count {cluster_count} exceeds particle count {n}")
    if cluster_count == n:
        return np.arange(n, dtype=np.int64)
    if cluster_count == 1:
        return np.zeros(n, dtype=np.int64)
    pos = particles.position
    lo = pos.min(axis=0)
    span = np.maximum(pos.max(axis=0) - lo, 1e-12)
    bins_per_axis = max(2, math.ceil(cluster_count ** (1.0 / 3.0)))
    while True:
        cell = np.clip((pos - lo) / span * bins_per_axis, 0,
                       bins_per_axis - 1).astype(np.int64)
        bin_id = (cell[:, 0] * bins_per_axis + cell[:, 1]) * bins_per_axis + cell[:, 2]
        if np.unique(bin_id).shape[0] >= cluster_count or bins_per_axis >= 64:
            break
        bins_per_axis *= 2
    order = np.lexsort((np.arange(n), bin_id))
    labels = np.empty(n, dtype=np.int64)
    # cut the bin-sorted particle list into near-equal contiguous chunks
    cuts = np.floor(np.arange(1, n + 1) * cluster_count / n - 1e-9).astype(np.int64)
    labels[order] = np.minimum(cuts, cluster_count - 1)
    return labels


def lam_from_mu(mu, nu: float):
    """Lame modulus from shear modulus at fixed Poisson ratio."""
    return mu * 2.0 * nu / (1.0 - 2.0 * nu)


def material_from_cluster_params(cluster_id: np.ndarray, cluster_count: int,
                                 values: np.ndarray, nu: float) -> MaterialField:
    """Expand per-cluster (mu_E, eta_v, gamma_v) rows into a per-particle
    MaterialField; lam_E follows mu_E at the fixed Poisson ratio."""
    values = np.asarray(values, dtype=np.float64).reshape(cluster_count, 3)
    mu = values[cluster_id, 0]
    return MaterialField(
        mu_E=mu,
        lam_E=lam_from_mu(mu, nu),
        eta_v=values[cluster_id, 1],
        gamma_v=values[cluster_id, 2],
        cluster_id=cluster_id.copy(),
        cluster_count=cluster_count,
    )


def simulate_and_render(scene: ParticleSystem, material: MaterialField,
                        drives: Sequence, frame_indices: Sequence[int],
                        camera, config: SimConfig) -> np.ndarray:
    """Load the material into a copy of the scene, run the simulation and
    render the requested frame indices (frame f = f * steps_per_frame steps).

    Returns a (len(frame_indices), H, W, 3) array. Simulation errors
    propagate; callers scoring a loss catch them and treat the candidate as
    infinitely bad.
    """
    frame_indices = sorted(int(f) for f in frame_indices)
    out = np.zeros((len(frame_indices), camera.height, camera.width, 3))
    if not frame_indices:
        return out
    if frame_indices[0] < 0:
        raise ValueError("frame indices must be >= 0")
    work = scene.copy()
    work.material = material.copy()
    spf = config.steps_per_frame
    max_frame = frame_indices[-1]
    snaps = run(work, config, drives, n_steps=max_frame * spf, frame_stride=spf)
    # run() returns one snapshot per frame 1..max_frame (or the input for 0 steps)
    for j, f in enumerate(frame_indices):
        snap = scene if f == 0 else snaps[f - 1]
        out[j] = render(snap, camera).rgb
    return out


def tv_loss(values: np.ndarray, neighbors: np.ndarray) -> float:
    """Mean squared neighbor difference of a per-particle parameter field."""
    v = np.asarray(values, dtype=np.float64)
    diffs = v[neighbors] - v[:, None]
    return float(np.mean(diffs ** 2))


def window_loss(scene: ParticleSystem, material: MaterialField,
                drives: Sequence, observations: ObservationSet,
                window_hi: int, config: SimConfig,
                lam_tv: float = 0.0,
                tv_neighbors: Optional[np.ndarray] = None) -> float:
    """Photometric window loss plus the parameter smoothness penalty:
    sum over observed frames in [1, window_hi] of masked L1, plus lam_tv
    times the total-variation loss of each parameter field."""
    sel = [(i, int(f)) for i, f in enumerate(observations.frame_indices)
           if 1 <= f <= window_hi]
    try:
        rendered = simulate_and_render(scene, material, drives,
                                       [f for _, f in sel],
                                       observations.camera, config)
    except SimulationError:
        return math.inf
    loss = 0.0
    for j, (obs_i, _f) in enumerate(sel):
        loss += masked_l1(rendered[j], observations.images[obs_i],
                          observations.masks[obs_i])
    if lam_tv > 0.0:
        if tv_neighbors is None:
            k = min(8, scene.n - 1)
            tv_neighbors = knn(scene.position, k)
        for name in PARAM_NAMES:
            loss += lam_tv * tv_loss(getattr(material, name), tv_neighbors)
    return loss


@dataclass
class EstimateResult:
    material: MaterialField
    cluster_values: np.ndarray        # (C, 3) best per-cluster parameters
    loss_trace: list                  # best full-window loss after each round
    round_logs: list                  # per-round accepted-loss sequences
    sims_used: int
    budget_exhausted: bool


class _BudgetExhausted(Exception):
    pass


class _Evaluator:
    """Caching window-loss evaluator with a simulation budget."""

    def __init__(self, scene, drives, observations, config, est, tv_neighbors):
        self.scene = scene
        self.drives = drives
        self.obs = observations
        self.config = config
        self.est = est
        self.tv_neighbors = tv_neighbors
        self.cluster_id = None
        self.sims = 0
        self.cache: dict = {}

    def loss(self, theta: np.ndarray, window_hi: int) -> float:
        key = (window_hi, theta.tobytes())
        if key in self.cache:
            return self.cache[key]
        if self.est.max_sims is not None and self.sims >= self.est.max_sims:
            raise _BudgetExhausted
        self.sims += 1
        mat = material_from_cluster_params(self.cluster_id,
                                           self.est.cluster_count,
                                           np.exp(theta), self.est.poisson_nu)
        val = window_loss(self.scene, mat, self.drives, self.obs, window_hi,
                          self.config, self.est.lam_tv, self.tv_neighbors)
        self.cache[key] = val
        return val


def _smoothing_projection(theta: np.ndarray, labels: np.ndarray,
                          neighbors: np.ndarray, lam_tv: float,
                          cluster_count: int) -> np.ndarray:
    """Proximal step pulling cluster log-parameters together along the
    cross-cluster neighbor graph: solve (I + lam L) x = theta per column."""
    if lam_tv <= 0.0 or cluster_count < 2:
        return theta
    W = np.zeros((cluster_count, cluster_count))
    li = labels[:, None].repeat(neighbors.shape[1], axis=1)
    lj = labels[neighbors]
    np.add.at(W, (li.ravel(), lj.ravel()), 1.0)
    W = 0.5 * (W + W.T)
    np.fill_diagonal(W, 0.0)
    total = labels.shape[0] * neighbors.shape[1]
    W /= total
    L = np.diag(W.sum(axis=1)) - W
    A = np.eye(cluster_count) + lam_tv * L
    return np.linalg.solve(A, theta)


def estimate(scene: ParticleSystem, observations: ObservationSet,
             drives: Sequence, est: EstimationConfig,
             config: SimConfig) -> EstimateResult:
    """Rolling coordinate-descent estimation.

    Round r optimizes observed frames up to r * window_k (clamped to the
    video length); afterwards cluster parameters are smoothed along the
    neighbor graph. The returned trace holds the best loss over the full
    observation set after each round and never increases.
    """
    if observations.n_frames == 0:
        raise ValueError("no observation frames")
    labels = cluster_particles(scene, est.cluster_count)
    tv_k = min(est.tv_knn_k, scene.n - 1)
    tv_neighbors = knn(scene.position, tv_k) if tv_k >= 1 else None
    ev = _Evaluator(scene, drives, observations, config, est, tv_neighbors)
    ev.cluster_id = labels

    theta = np.array([[0.5 * (math.log(est.bounds[nm][0])
                              + math.log(est.bounds[nm][1]))
                       for nm in PARAM_NAMES]
                      for _ in range(est.cluster_count)])
    lo = np.array([math.log(est.bounds[nm][0]) for nm in PARAM_NAMES])
    hi = np.array([math.log(est.bounds[nm][1]) for nm in PARAM_NAMES])

    last_frame = int(observations.frame_indices.max())
    steps = np.full((est.cluster_count, 3), est.fd_step)
    coords = [(c, p) for c in range(est.cluster_count) for p in range(3)]

    full_hi = last_frame
    best_theta = theta.copy()
    best_full = math.inf
    loss_trace: list = []
    round_logs: list = []
    exhausted = False

    n_rounds = max(1, min(est.rounds, math.ceil(last_frame / est.window_k)))
    try:
        for r in range(1, n_rounds + 1):
            window_hi = min(r * est.window_k, last_frame)
            cur = ev.loss(theta, window_hi)
            accepted = [cur]
            for _it in range(est.iters_per_round):
                moved = False
                for c, p in coords:
                    h = steps[c, p]
                    up = theta.copy()
                    up[c, p] = min(up[c, p] + h, hi[p])
                    dn = theta.copy()
                    dn[c, p] = max(dn[c, p] - h, lo[p])
                    l_up = ev.loss(up, window_hi)
                    l_dn = ev.loss(dn, window_hi)
                    best_side, l_side = (up, l_up) if l_up <= l_dn else (dn, l_dn)
                    if l_side < cur:
                        theta, cur = best_side, l_side
                        accepted.append(cur)
                        steps[c, p] = min(h * est.step_growth, est.step_max)
                        moved = True
                    else:
                        steps[c, p] = max(h * 0.5, est.step_min)
                if not moved and np.all(steps <= est.step_min):
                    break
            theta = np.clip(_smoothing_projection(theta, labels, tv_neighbors,
                                                  est.lam_tv, est.cluster_count),
                            lo, hi) if tv_neighbors is not None else theta
            full_loss = ev.loss(theta, full_hi)
            if full_loss < best_full:
                best_full = full_loss
                best_theta = theta.copy()
            loss_trace.append(best_full)
            round_logs.append({"window_hi": window_hi, "accepted": accepted})
    except _BudgetExhausted:
        exhausted = True
        if not loss_trace:
            loss_trace.append(best_full)

    if not math.isfinite(best_full):
        # never evaluated the full window (tiny budgets); fall back to theta
        best_theta = theta.copy()
    values = np.exp(best_theta)
    material = material_from_cluster_params(labels, est.cluster_count,
                                            values, est.poisson_nu)
    return EstimateResult(material=material, cluster_values=values,
                          loss_trace=loss_trace, round_logs=round_logs,
                          sims_used=ev.sims, budget_exhausted=exhausted)
