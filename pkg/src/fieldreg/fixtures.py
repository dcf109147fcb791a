"""Ready-made analytic scenes: slabs, blob objects, and registration pairs.

These double as ground-truth oracles: the primitives expose exact signed
distances and the pair builder knows the transform it applied, so tests and
demos can score recovered poses against the truth.
"""

from __future__ import annotations

import math

import numpy as np

from .fields import DensityScene, GridDensity, GridEmission, GridField, cube_grid_geometry
from .geometry import PinholeCamera, RigidTransform, compose, rotation_from_axis_angle
from .primitives import Box, Capsule, Posed, Sphere, Union, has_color


def ring_cameras(
    n: int = 6,
    distance: float = 2.4,
    height: float = 1.0,
    target=(0.0, 0.0, 0.0),
    fx: float = 300.0,
    width: int = 160,
    height_px: int = 120,
    phase: float = 0.0,
) -> list[PinholeCamera]:
    """Cameras on a horizontal ring, all looking at ``target``."""
    cams = []
    for k in range(n):
        ang = phase + 2.0 * math.pi * k / n
        pos = np.array([distance * math.cos(ang), distance * math.sin(ang), height])
        cams.append(PinholeCamera.look_at(pos, target, fx=fx, width=width, height=height_px))
    return cams


def dome_cameras(n_ring: int = 6, **kw) -> list[PinholeCamera]:
    """A ring plus top and bottom views for all-around coverage."""
    cams = ring_cameras(n=n_ring, **kw)
    fx = kw.get("fx", 300.0)
    width = kw.get("width", 160)
    height_px = kw.get("height_px", 120)
    distance = kw.get("distance", 2.4)
    for z in (distance, -distance):
        cams.append(
            PinholeCamera.look_at([0.05, 0.0, z], [0, 0, 0], fx=fx, width=width, height=height_px)
        )
    return cams


def slab_scene(
    z_front: float = 0.5,
    thickness: float = 0.5,
    tau: float = 10.0,
    radius: float = 1.0,
    camera_z: float = 2.0,
    color=None,
    fx: float = 100.0,
    image: int = 64,
) -> DensityScene:
    """Axis-aligned slab occupying z in [z_front - thickness, z_front], seen
    from a camera on the +z axis looking down. The camera-facing plane sits
    at distance camera_z - z_front."""
    slab = Box(
        center=[0.0, 0.0, z_front - thickness / 2.0],
        half_extents=[0.9 * radius, 0.9 * radius, thickness / 2.0],
        density=tau,
        color=color,
    )
    cam = PinholeCamera.look_at([0.0, 0.0, camera_z], [0.0, 0.0, 0.0], fx=fx, width=image, height=image)
    return DensityScene(
        density=slab, radius=radius, cameras=[cam], emission=slab if color is not None else None, name="slab"
    )


def empty_scene(radius: float = 1.0, cameras=None) -> DensityScene:
    root = Sphere(center=[0, 0, 0], radius=radius / 10, density=0.0)
    return DensityScene(
        density=root,
        radius=radius,
        cameras=list(cameras) if cameras else ring_cameras(2),
        name="empty",
    )


# Fixture objects carry a fixed generic rotation: flat faces aligned with the
# extraction grid would binarize with one coherent sub-voxel phase and bias
# the matching optimum by a fraction of a voxel.
GENERIC_POSE = RigidTransform(
    rotation_from_axis_angle(np.array([1.0, 2.0, 3.0]) / math.sqrt(14.0) * 0.41),
    np.zeros(3),
)


def blob_object(tau: float = 40.0, colored: bool = False, generic_pose: bool = True, size: float = 1.0):
    """Asymmetric object: a sphere, a box shoulder, and a capsule nose.

    Spans roughly 1.1 * size units, so keypoints on it give a max spread of
    about that, and it has no rotational symmetry that could alias
    registration.
    """
    col = (lambda c: c if colored else None)
    s = float(size)
    root = Union(
        (
            Sphere(center=[0.0, 0.0, 0.0], radius=0.32 * s, density=tau, color=col([0.9, 0.2, 0.1])),
            Box(
                center=np.array([0.33, 0.0, 0.05]) * s,
                half_extents=np.array([0.17, 0.12, 0.2]) * s,
                density=tau,
                color=col([0.1, 0.7, 0.2]),
            ),
            Capsule(
                point_a=np.array([0.0, 0.0, 0.28]) * s,
                point_b=np.array([-0.28, 0.0, 0.5]) * s,
                radius=0.09 * s,
                density=tau,
                color=col([0.2, 0.3, 0.9]),
            ),
        )
    )
    return Posed(root, GENERIC_POSE) if generic_pose else root


def blob_keypoints(generic_pose: bool = True) -> np.ndarray:
    """Hand-picked feature points on the blob object's surface."""
    pts = np.array(
        [
            [0.0, 0.0, -0.32],  # sphere bottom pole
            [0.0, 0.32, 0.0],  # sphere +y pole
            [0.5, 0.12, 0.25],  # box top corner
            [0.5, -0.12, -0.15],  # box bottom corner
            [-0.28, 0.0, 0.59],  # capsule tip
            [0.0, -0.32, 0.0],  # sphere -y pole
        ]
    )
    return GENERIC_POSE.apply(pts) if generic_pose else pts


def blob_scene(radius: float = 1.0, n_cameras: int = 6, colored: bool = False, **cam_kw) -> DensityScene:
    root = blob_object(colored=colored)
    cams = dome_cameras(n_ring=n_cameras, **cam_kw)
    return DensityScene(
        density=root,
        radius=radius,
        cameras=cams,
        emission=root if has_color(root) else None,
        name="blob",
    )


def two_object_scene(radius: float = 1.0, colored: bool = False, size: float = 0.7, **cam_kw) -> DensityScene:
    """Two identical blob objects in different poses: the multi-modal fixture."""
    obj = blob_object(colored=colored, size=size)
    place_1 = RigidTransform(rotation_from_axis_angle([0.05, -0.1, 0.2]), np.array([-0.42, -0.1, 0.0]))
    place_2 = RigidTransform(
        rotation_from_axis_angle([0.1, 0.05, math.pi - 0.15]), np.array([0.45, 0.28, 0.05])
    )
    root = Union((Posed(obj, place_1), Posed(obj, place_2)))
    cams = dome_cameras(**cam_kw)
    return DensityScene(
        density=root,
        radius=radius,
        cameras=cams,
        emission=root if has_color(root) else None,
        name="two-objects",
    )


def moved_scene(scene: DensityScene, move: RigidTransform, name: str = "") -> DensityScene:
    """Rigidly move every feature of a scene by ``move`` (cameras included)."""
    root = Posed(scene.density, move)
    cams = [
        PinholeCamera(
            world_from_camera=compose(move, c.world_from_camera),
            fx=c.fx,
            fy=c.fy,
            cx=c.cx,
            cy=c.cy,
            width=c.width,
            height=c.height,
        )
        for c in scene.cameras
    ]
    emission = Posed(scene.emission, move) if scene.emission is not None else None
    return DensityScene(
        density=root,
        radius=scene.radius,
        cameras=cams,
        emission=emission,
        name=name or (scene.name + "-moved"),
    )


def registration_pair(
    move: RigidTransform | None = None,
    seed: int = 0,
    scene_builder=blob_scene,
    keypoints: np.ndarray | None = None,
    keypoint_noise: float = 0.0,
    **scene_kw,
):
    """Scene A, scene B = A moved by ``move``, noisy keypoint pairs, and the
    ground-truth registration transform (mapping B coordinates into A).

    Returns (scene_a, scene_b, q_a, q_b, gt) with gt = move^{-1}.
    """
    rng = np.random.default_rng(seed)
    if move is None:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        move = RigidTransform(
            rotation_from_axis_angle(axis * rng.uniform(0.3, 0.9)), rng.uniform(-0.25, 0.25, size=3)
        )
    scene_a = scene_builder(**scene_kw)
    scene_b = moved_scene(scene_a, move)
    q_a = blob_keypoints() if keypoints is None else np.asarray(keypoints, dtype=np.float64)
    q_b = move.apply(q_a)
    if keypoint_noise > 0:
        q_a = q_a + rng.normal(0.0, keypoint_noise, size=q_a.shape)
        q_b = q_b + rng.normal(0.0, keypoint_noise, size=q_b.shape)
    return scene_a, scene_b, q_a, q_b, move.inverse()


def grid_scene_from_analytic(scene: DensityScene, resolution=64, with_emission: bool = False) -> DensityScene:
    """Sample an analytic scene's density (and emission) onto a voxel grid."""
    origin, spacing = cube_grid_geometry(scene.radius, resolution)
    shell = GridField(np.zeros(tuple(check := (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution))), origin, spacing)
    nodes = shell.node_points()
    tau = scene.density_at(nodes)
    grid = shell.with_values(tau.reshape(shell.resolution, order="F"))
    emission = None
    if with_emission and scene.has_emission:
        rgb = scene.emission_at(nodes).reshape(shell.resolution + (3,), order="F")
        emission = GridEmission(values=rgb, origin=origin, spacing=spacing)
    return DensityScene(
        density=GridDensity(grid),
        radius=scene.radius,
        cameras=list(scene.cameras),
        emission=emission,
        name=scene.name + "-grid",
    )
