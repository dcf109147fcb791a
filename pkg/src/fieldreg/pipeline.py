"""Orchestration: surface extraction, level planning, and pair registration.

Glue between the field/distill/registration layers used by the CLI, the
HTTP service, and tests. No I/O here; see sceneio for the disk formats.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .distill import SmoothedField, distill_grid
from .fields import (
    DEFAULT_DELTA,
    DEFAULT_EPSILON,
    DEFAULT_RESOLUTION,
    DensityScene,
    SurfaceFieldGrid,
    extract_surface_field,
)
from .registration import (
    KeypointSet,
    RegistrationConfig,
    RegistrationResult,
    register_restarts,
    sigma_level_values,
)


@dataclass
class DistilledScene:
    surface: SurfaceFieldGrid
    fields: list[SmoothedField]
    seed: int
    n_samples: int
    method: str


def distill_levels(
    surface: SurfaceFieldGrid,
    levels,
    n: int = 64,
    seed: int = 0,
    method: str = "conv",
) -> list[SmoothedField]:
    """Smooth the thresholded field once per level, keeping level labels.

    A level of exactly 0 stores the thresholded field smoothed at one voxel
    (raw categorical grids are useless to the optimizer) but keeps sigma=0
    so the schedule's nearest-level lookup still finds it.
    """
    voxel = float(np.min(surface.grid.spacing))
    fields = []
    for level in levels:
        sigma_eff = float(level) if level > 0 else voxel
        (sf,) = distill_grid(surface, [sigma_eff], n=n, seed=seed, method=method)
        fields.append(replace(sf, sigma=float(level)))
    return fields


def plan_levels(config: RegistrationConfig, keypoints: KeypointSet) -> list[float]:
    sigma_start, sigma_end = config.resolved_sigmas(keypoints)
    if config.fixed_sigma is not None:
        return [float(config.fixed_sigma)]
    return sigma_level_values(sigma_start, sigma_end, config.sigma_levels)


def prepare_scene(
    scene: DensityScene,
    levels,
    resolution=DEFAULT_RESOLUTION,
    delta: float = DEFAULT_DELTA,
    epsilon: float = DEFAULT_EPSILON,
    step: float | None = None,
    n: int = 64,
    seed: int = 0,
    method: str = "conv",
) -> DistilledScene:
    surface = extract_surface_field(
        scene, resolution=resolution, delta=delta, epsilon=epsilon, step=step
    )
    fields = distill_levels(surface, levels, n=n, seed=seed, method=method)
    return DistilledScene(surface=surface, fields=fields, seed=seed, n_samples=n, method=method)


def register_pair(
    scene_a: DensityScene,
    scene_b: DensityScene,
    q_a,
    q_b,
    config: RegistrationConfig | None = None,
    resolution=DEFAULT_RESOLUTION,
    delta: float = DEFAULT_DELTA,
    epsilon: float = DEFAULT_EPSILON,
    step: float | None = None,
    trace_hook=None,
) -> tuple[RegistrationResult, list[dict]]:
    """Distill both scenes at the planned levels, then run best-of-N."""
    config = config or RegistrationConfig()
    keypoints = KeypointSet(q_a, q_b)
    levels = plan_levels(config, keypoints)
    da = prepare_scene(scene_a, levels, resolution, delta, epsilon, step, seed=config.seed)
    db = prepare_scene(scene_b, levels, resolution, delta, epsilon, step, seed=config.seed)
    result, summaries = register_restarts(
        da.fields, db.fields, keypoints, config, radius=scene_a.radius, trace_hook=trace_hook
    )
    return result, summaries
