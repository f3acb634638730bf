"""Monocular template-based tracking of deforming textured surfaces."""

from .camera import Intrinsics, ProjectionError, project, project_jacobian
from .config import ConfigError, RunConfig, load_config
from .energy import DeformState, EnergyWeights, TERMS
from .imaging import HogParams, build_orientation_field
from .mesh import MeshError, TemplateMesh, build_template, load_template
from .solver import SolverError, SolverOptions, gauss_newton
from .synth import generate_sequence, make_grid_mesh, rasterize
from .tracker import (SurfaceTracker, TrackingError, evaluate_against_ground_truth, initialize,
                      track_frame)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DeformState", "EnergyWeights", "HogParams", "Intrinsics", "MeshError",
    "ProjectionError", "RunConfig", "SolverError", "SolverOptions", "SurfaceTracker", "TERMS",
    "TemplateMesh", "TrackingError", "build_orientation_field", "build_template",
    "evaluate_against_ground_truth", "gauss_newton", "generate_sequence", "initialize",
    "load_config", "load_template", "make_grid_mesh", "project", "project_jacobian",
    "rasterize", "track_frame",
]
