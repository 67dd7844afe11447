"""Soft-tissue splat simulation toolkit: visco-elastic MPM over Gaussian-splat
particles, a deterministic software rasterizer, trajectory-driven manipulation
and inverse estimation of per-region material parameters."""

from .core import (Camera, Grid, MaterialField, ObservationSet, ParticleSystem,
                   SceneError, SimConfig, SimulationError, Trajectory,
                   lame_from_young_poisson, validate_scene, young_from_lame)

__version__ = "0.1.0"

__all__ = [
    "Camera", "Grid", "MaterialField", "ObservationSet", "ParticleSystem",
    "SceneError", "SimConfig", "SimulationError", "Trajectory",
    "lame_from_young_poisson", "validate_scene", "young_from_lame",
    "__version__",
]
