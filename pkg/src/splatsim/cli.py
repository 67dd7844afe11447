"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (simulation blew up), 2 usage or
validation problems (missing files, bad config values).
"""

from __future__ import annotations

import csv
import functools
import socket
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import geometry, scene_prep
from .core import (Camera, ObservationSet, ParticleSystem, SceneError,
                   SimConfig, SimulationError, Trajectory, validate_scene)
from .estimate import EstimationConfig, estimate as run_estimate
from .motion import TrajectoryDrive
from .mpm import run as run_sim
from .renderer import load_png, render, save_png

# Defaults: 2-unit cube domain, 50^3 grid, 10k steps per second of
# 25 fps video (dt 1e-4, frame stride 400), 80k steps for 8 seconds.
DEFAULT_RUN_CONFIG = {
    "simulation": {
        "grid_resolution": 50,
        "dt": 1.0e-4,
        "frame_dt": 0.04,
        "spline_degree": 2,
        "n_steps": 80000,
        "frame_stride": 400,
        "boundary": ["slip", "slip", "slip", "slip", "sticky", "slip"],
    },
    "material": {
        "density": 1000.0,
        "young": 1.0e4,
        "poisson": 0.45,
        "eta_v": 0.0,
        "gamma_v": 0.0,
    },
    "camera": {
        "width": 256,
        "height": 256,
        "fov_deg": 45.0,
        "distance": 3.0,
    },
    "drives": [],
    "estimation": {},
}


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_run_config(path) -> dict:
    if path is None:
        return dict(DEFAULT_RUN_CONFIG)
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"run config not found: {p}")
    with open(p) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{p}: run config must be a mapping")
    return _merge(DEFAULT_RUN_CONFIG, data)


def sim_config_from(cfg: dict) -> SimConfig:
    s = cfg["simulation"]
    return SimConfig(
        grid_resolution=int(s["grid_resolution"]),
        dt=float(s["dt"]),
        frame_dt=float(s["frame_dt"]),
        spline_degree=int(s["spline_degree"]),
        boundary=tuple(s["boundary"]),
    )


def camera_from(cfg: dict) -> Camera:
    c = cfg["camera"]
    if "fx" in c:
        cam = Camera(fx=float(c["fx"]), fy=float(c["fy"]),
                     cx=float(c.get("cx", c["width"] / 2)),
                     cy=float(c.get("cy", c["height"] / 2)),
                     width=int(c["width"]), height=int(c["height"]),
                     near=float(c.get("near", 1e-3)))
    else:
        cam = Camera.front_view(width=int(c["width"]), height=int(c["height"]),
                                distance=float(c.get("distance", 3.0)),
                                fov_deg=float(c.get("fov_deg", 45.0)))
    if "center" in c:
        cam.center = np.asarray(c["center"], dtype=np.float64)
    if "rotation" in c:
        cam.R = np.asarray(c["rotation"], dtype=np.float64).reshape(3, 3)
    return cam


def load_trajectory(spec: dict, default_radius: float) -> Trajectory:
    radius = float(spec.get("radius", default_radius))
    start = int(spec.get("start_frame", 0))
    if "trajectory" in spec:
        bundle = geometry.load_bundle(spec["trajectory"])
        pid = int(spec.get("point_id", 0))
        frames = np.arange(bundle.n_frames) + start
        return Trajectory(frames=frames, points=bundle.points[:, pid, :],
                          region_radius=radius)
    if "frames" in spec:
        rows = spec["frames"]
        frames = np.array([int(r[0]) for r in rows]) + start
        points = np.array([[float(r[1]), float(r[2]), float(r[3])] for r in rows])
        return Trajectory(frames=frames, points=points, region_radius=radius)
    raise ValueError("drive spec needs 'trajectory' (bundle path) or 'frames'")


def build_drives(cfg: dict, scene: ParticleSystem, config: SimConfig) -> list:
    drives = []
    for spec in cfg.get("drives", []):
        traj = load_trajectory(spec, config.effective_drive_radius)
        drives.append(TrajectoryDrive(traj, scene, config.frame_dt))
    return drives


def prepare_for_sim(scene: ParticleSystem, cfg: dict, config: SimConfig) -> None:
    """Install config material defaults (where the scene has none) and derive
    masses and rest volumes from the configured density."""
    from .core import MaterialField
    m = cfg["material"]
    n = scene.n
    scene.material = MaterialField.uniform(
        n, young=float(m["young"]), poisson=float(m["poisson"]),
        eta_v=float(m["eta_v"]), gamma_v=float(m["gamma_v"]))
    scene.mass[:] = 1.0
    scene_prep.estimate_rest_volumes(scene, config)
    scene.mass = float(m["density"]) * scene.volume0


def cli_errors(fn):
    """Map exceptions to the documented exit codes."""
    @functools.wraps(fn)
    def wrapper(*a, **kw):
        try:
            return fn(*a, **kw)
        except (FileNotFoundError, SceneError, ValueError, KeyError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except SimulationError as exc:
            click.echo(f"simulation failed: {exc}", err=True)
            sys.exit(1)
    return wrapper


@click.group()
def main():
    """Soft-tissue splat simulation toolkit."""


@main.command("prepare")
@click.argument("scene_in", type=click.Path())
@click.argument("scene_out", type=click.Path())
@click.option("--layers", default=1000, show_default=True,
              help="Thickening layers.")
@click.option("--z-expand", default=0.25, show_default=True,
              help="Relative z-max expansion of the keep box.")
@click.option("--seed", default=0, show_default=True)
@click.option("--cap", default=None, type=int,
              help="Max total particles after thickening (subsampled).")
@click.option("--z-offset", default=None, type=float,
              help="Temporary +z shift for thickening rays "
                   "[default: 2x the normalized z extent].")
@click.option("--skip-thicken", is_flag=True, help="Only normalize.")
@cli_errors
def cmd_prepare(scene_in, scene_out, layers, z_expand, seed, cap, z_offset,
                skip_thicken):
    """Load a scene (container or .ply), normalize into the simulation cube,
    thicken the surface and save the result."""
    path = Path(scene_in)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    if path.suffix.lower() == ".ply":
        scene = scene_prep.import_point_cloud(path)
    else:
        scene = scene_prep.load_scene(path)
    n_in = scene.n
    scene, _tf = scene_prep.normalize(scene)
    if skip_thicken:
        out, kept = scene, 0
    else:
        z = scene.position[:, 2]
        extent = float(z.max() - z.min()) or 1.0
        offset = z_offset if z_offset is not None else 2.0 * extent
        shift = offset - float(z.min())
        scene.position[:, 2] += shift
        out, info = scene_prep.thicken(scene, layers=layers, z_expand=z_expand,
                                       seed=seed, cap=cap)
        out.position[:, 2] -= shift
        kept = info.kept_copies
        if info.capped:
            click.echo(f"capped kept copies to fit {cap} total particles")
    scene_prep.save_scene(scene_out, out)
    click.echo(f"particles in: {n_in}  copies kept: {kept}  out: {out.n}")
    click.echo(f"wrote {scene_out}")


@main.command("simulate")
@click.argument("scene_path", type=click.Path())
@click.argument("run_config", type=click.Path(), required=False)
@click.option("--out-dir", "-o", required=True, type=click.Path())
@click.option("--steps", default=None, type=int, help="Override n_steps.")
@click.option("--seed", default=0, show_default=True)
@click.option("--deterministic/--no-deterministic", default=True,
              help="Fixed accumulation order (always on in this build).")
@cli_errors
def cmd_simulate(scene_path, run_config, out_dir, steps, seed, deterministic):
    """Run the MPM simulation and write numbered frames + diagnostics."""
    cfg = load_run_config(run_config)
    config = sim_config_from(cfg)
    scene = scene_prep.load_scene(scene_path)
    prepare_for_sim(scene, cfg, config)
    issues = validate_scene(scene, config)
    if issues:
        raise ValueError("scene not simulation-ready: " + "; ".join(issues))
    camera = camera_from(cfg)
    drives = build_drives(cfg, scene, config)
    n_steps = int(cfg["simulation"]["n_steps"]) if steps is None else steps
    stride = int(cfg["simulation"]["frame_stride"])
    try:
        snaps, diags = run_sim(scene, config, drives, n_steps=n_steps,
                               frame_stride=stride, collect_diagnostics=True)
    except SimulationError as exc:
        raise
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "sim_time", "total_mass",
                    "momentum_x", "momentum_y", "momentum_z",
                    "max_velocity", "active_nodes"])
        for i, (snap, d) in enumerate(zip(snaps, diags)):
            save_png(out / f"frame_{i:06d}.png", render(snap, camera).rgb)
            w.writerow([i, (i + 1) * stride * config.dt if n_steps else 0.0,
                        repr(float(d.total_mass)),
                        repr(float(d.total_momentum[0])),
                        repr(float(d.total_momentum[1])),
                        repr(float(d.total_momentum[2])),
                        repr(float(d.max_velocity)), d.active_nodes])
    click.echo(f"wrote {len(snaps)} frames to {out}")


def load_observations(obs_dir) -> ObservationSet:
    obs_dir = Path(obs_dir)
    cam_path = obs_dir / "camera.yaml"
    if not cam_path.exists():
        raise FileNotFoundError(f"camera description missing: {cam_path}")
    with open(cam_path) as fh:
        cam_cfg = yaml.safe_load(fh)
    camera = camera_from({"camera": cam_cfg})
    frames = sorted(obs_dir.glob("frame_*.png"))
    if not frames:
        raise SceneError(f"no frame_*.png in {obs_dir}")
    indices, images, masks = [], [], []
    for f in frames:
        idx = int(f.stem.split("_")[1])
        img = load_png(f)
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        mask_path = obs_dir / f"mask_{idx:06d}.png"
        if mask_path.exists():
            mask = load_png(mask_path) > 0.5
            if mask.ndim == 3:
                mask = mask[:, :, 0]
        else:
            mask = np.ones(img.shape[:2], dtype=bool)
        indices.append(idx)
        images.append(img[:, :, :3])
        masks.append(mask)
    return ObservationSet(frame_indices=np.array(indices),
                          images=np.stack(images), masks=np.stack(masks),
                          camera=camera)


def save_observations(obs_dir, observations: ObservationSet) -> None:
    obs_dir = Path(obs_dir)
    obs_dir.mkdir(parents=True, exist_ok=True)
    cam = observations.camera
    with open(obs_dir / "camera.yaml", "w") as fh:
        yaml.safe_dump({"width": cam.width, "height": cam.height,
                        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                        "center": cam.center.tolist(),
                        "rotation": cam.R.tolist(), "near": cam.near}, fh)
    for i, f in enumerate(observations.frame_indices):
        save_png(obs_dir / f"frame_{int(f):06d}.png", observations.images[i])
        save_png(obs_dir / f"mask_{int(f):06d}.png",
                 observations.masks[i].astype(np.float64))


@main.command("estimate")
@click.argument("scene_path", type=click.Path())
@click.argument("obs_dir", type=click.Path())
@click.argument("run_config", type=click.Path(), required=False)
@click.option("--out", "-o", "out_path", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
@click.option("--deterministic/--no-deterministic", default=True)
@cli_errors
def cmd_estimate(scene_path, obs_dir, run_config, out_path, seed, deterministic):
    """Estimate per-cluster material parameters from an observation set."""
    cfg = load_run_config(run_config)
    config = sim_config_from(cfg)
    scene = scene_prep.load_scene(scene_path)
    prepare_for_sim(scene, cfg, config)
    observations = load_observations(obs_dir)
    drives = build_drives(cfg, scene, config)
    est = EstimationConfig(**cfg.get("estimation", {}))
    result = run_estimate(scene, observations, drives, est, config)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "mu_E", "lam_E", "eta_v", "gamma_v"])
        mat = result.material
        for c in range(mat.cluster_count):
            mu = result.cluster_values[c, 0]
            w.writerow([c, repr(float(mu)),
                        repr(float(mu * 2 * est.poisson_nu
                                   / (1 - 2 * est.poisson_nu))),
                        repr(float(result.cluster_values[c, 1])),
                        repr(float(result.cluster_values[c, 2]))])
    map_path = out.with_name(out.stem + "_clusters.csv")
    with open(map_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["particle_id", "cluster_id"])
        for i, c in enumerate(result.material.cluster_id):
            w.writerow([i, int(c)])
    click.echo(f"loss trace: {['%.6g' % v for v in result.loss_trace]}")
    if result.budget_exhausted:
        click.echo("warning: simulation budget exhausted; best-so-far returned",
                   err=True)
    click.echo(f"wrote {out} and {map_path}")


@main.command("refine-traj")
@click.argument("bundle_in", type=click.Path())
@click.argument("bundle_out", type=click.Path())
@click.option("--k", default=8, show_default=True)
@click.option("--iterations", default=200, show_default=True)
@click.option("--lam-data", default=1.0, show_default=True)
@click.option("--lam-traj", default=1.0, show_default=True)
@cli_errors
def cmd_refine_traj(bundle_in, bundle_out, k, iterations, lam_data, lam_traj):
    """Refine a noisy trajectory bundle with the smoothness regularizer."""
    if not Path(bundle_in).exists():
        raise FileNotFoundError(f"file not found: {bundle_in}")
    bundle = geometry.load_bundle(bundle_in)
    try:
        refined = geometry.refine_trajectories(bundle, k=k,
                                               iterations=iterations,
                                               lam_data=lam_data,
                                               lam_traj=lam_traj)
    except geometry.ConvergenceError as exc:
        click.echo(f"refinement diverged: {exc}", err=True)
        sys.exit(1)
    geometry.save_bundle(bundle_out, refined)
    click.echo(f"wrote {bundle_out}")


@main.command("render")
@click.argument("scene_path", type=click.Path())
@click.option("--out", "-o", required=True, type=click.Path())
@click.option("--config", "run_config", default=None, type=click.Path())
@cli_errors
def cmd_render(scene_path, out, run_config):
    """Render a scene to a PNG with the configured camera."""
    cfg = load_run_config(run_config)
    scene = scene_prep.load_scene(scene_path)
    camera = camera_from(cfg)
    save_png(out, render(scene, camera).rgb)
    click.echo(f"wrote {out}")


@main.command("serve")
@click.argument("scene_path", type=click.Path())
@click.option("--config", "run_config", default=None, type=click.Path())
@click.option("--port", default=8765, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--fps", default=10.0, show_default=True)
@click.option("--static-dir", default=None, type=click.Path(),
              help="Serve a viewer bundle at / (e.g. frontend/dist).")
@cli_errors
def cmd_serve(scene_path, run_config, port, host, fps, static_dir):
    """Host an interactive session server on /session."""
    import uvicorn

    from .service import Session, create_app

    cfg = load_run_config(run_config)
    config = sim_config_from(cfg)
    scene = scene_prep.load_scene(scene_path)
    prepare_for_sim(scene, cfg, config)
    issues = validate_scene(scene, config)
    if issues:
        raise ValueError("scene not simulation-ready: " + "; ".join(issues))
    camera = camera_from(cfg)
    # fail fast (exit 2) when the port is taken
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((host, port))
    except OSError as exc:
        raise ValueError(f"cannot bind {host}:{port}: {exc}")
    finally:
        probe.close()

    def factory():
        return Session(scene, config, camera, fps=fps)

    app = create_app(factory)
    if static_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=static_dir, html=True))
    click.echo(f"serving on ws://{host}:{port}/session")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
