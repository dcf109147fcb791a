"""Disk formats: scene directories, raw grids, keypoints, images, results.

A scene directory holds ``scene.json`` plus ``density.raw`` (and optional
``rgb.raw``) for grid scenes; analytic scenes embed their primitive tree in
the manifest. Raw grids are 32-bit little-endian floats in x-fastest order
(x, then y, then z). Distilled surface data lives next to the scene as
``surface.json`` + ``surface.raw`` + one ``smooth_<k>.raw`` per sigma
level. All writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .distill import SmoothedField
from .exceptions import SceneFormatError
from .fields import DensityScene, GridDensity, GridEmission, GridField, SurfaceFieldGrid
from .geometry import PinholeCamera, RigidTransform
from .pipeline import DistilledScene
from .primitives import has_color, primitive_from_dict

SCENE_MANIFEST = "scene.json"
SURFACE_MANIFEST = "surface.json"
DENSITY_RAW = "density.raw"
RGB_RAW = "rgb.raw"
SURFACE_RAW = "surface.raw"
KEYPOINTS_FILE = "keypoints.json"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    atomic_write_bytes(path, json.dumps(obj, indent=2).encode())


def write_raw_grid(path, values: np.ndarray) -> None:
    """float32 little-endian, x-fastest (x, then y, then z)."""
    atomic_write_bytes(path, np.asarray(values, dtype="<f4").ravel(order="F").tobytes())


def read_raw_grid(path, resolution) -> np.ndarray:
    res = tuple(int(n) for n in resolution)
    expected = res[0] * res[1] * res[2]
    data = np.fromfile(path, dtype="<f4")
    if data.size != expected:
        raise SceneFormatError(f"{path}: expected {expected} floats, found {data.size}")
    return data.astype(np.float64).reshape(res, order="F")


def write_raw_rgb(path, values: np.ndarray) -> None:
    """Same voxel order as the scalar grids, 3 channels interleaved."""
    arr = np.asarray(values, dtype="<f4")
    atomic_write_bytes(path, arr.transpose(3, 0, 1, 2).ravel(order="F").tobytes())


def read_raw_rgb(path, resolution) -> np.ndarray:
    res = tuple(int(n) for n in resolution)
    expected = 3 * res[0] * res[1] * res[2]
    data = np.fromfile(path, dtype="<f4")
    if data.size != expected:
        raise SceneFormatError(f"{path}: expected {expected} floats, found {data.size}")
    return data.astype(np.float64).reshape((3,) + res, order="F").transpose(1, 2, 3, 0)


def _camera_to_dict(cam: PinholeCamera) -> dict:
    return {
        "pose": cam.world_from_camera.matrix().tolist(),
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "width": cam.width,
        "height": cam.height,
    }


def _camera_from_dict(data: dict) -> PinholeCamera:
    return PinholeCamera(
        world_from_camera=RigidTransform.from_matrix(np.asarray(data["pose"], dtype=np.float64)),
        fx=float(data["fx"]),
        fy=float(data["fy"]),
        cx=float(data["cx"]),
        cy=float(data["cy"]),
        width=int(data["width"]),
        height=int(data["height"]),
    )


def save_scene(scene_dir, scene: DensityScene) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "radius": scene.radius,
        "cameras": [_camera_to_dict(c) for c in scene.cameras],
    }
    if isinstance(scene.density, GridDensity):
        grid = scene.density.grid
        nx, ny, nz = grid.resolution
        manifest["grid"] = {
            "res_x": nx,
            "res_y": ny,
            "res_z": nz,
            "origin": grid.origin.tolist(),
            "spacing": grid.spacing.tolist(),
        }
        write_raw_grid(scene_dir / DENSITY_RAW, grid.values)
        if isinstance(scene.emission, GridEmission):
            write_raw_rgb(scene_dir / RGB_RAW, scene.emission.values)
    elif hasattr(scene.density, "to_dict"):
        manifest["analytic"] = scene.density.to_dict()
    else:
        raise SceneFormatError(f"cannot serialize density of type {type(scene.density)!r}")
    atomic_write_json(scene_dir / SCENE_MANIFEST, manifest)


def load_scene(scene_dir) -> DensityScene:
    scene_dir = Path(scene_dir)
    manifest_path = scene_dir / SCENE_MANIFEST
    if not manifest_path.exists():
        raise SceneFormatError(f"missing {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    try:
        radius = float(manifest["radius"])
        cameras = [_camera_from_dict(c) for c in manifest.get("cameras", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"{manifest_path}: {exc!r}") from exc

    if "grid" in manifest:
        g = manifest["grid"]
        try:
            res = (int(g["res_x"]), int(g["res_y"]), int(g["res_z"]))
            origin = np.asarray(g["origin"], dtype=np.float64)
            spacing = np.asarray(g["spacing"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"{manifest_path}: bad grid block ({exc!r})") from exc
        density_path = scene_dir / DENSITY_RAW
        if not density_path.exists():
            raise SceneFormatError(f"missing {density_path}")
        grid = GridField(read_raw_grid(density_path, res), origin, spacing)
        emission = None
        rgb_path = scene_dir / RGB_RAW
        if rgb_path.exists():
            emission = GridEmission(values=read_raw_rgb(rgb_path, res), origin=origin, spacing=spacing)
        return DensityScene(
            density=GridDensity(grid), radius=radius, cameras=cameras, emission=emission,
            name=scene_dir.name,
        )
    if "analytic" in manifest:
        try:
            root = primitive_from_dict(manifest["analytic"])
        except (KeyError, ValueError) as exc:
            raise SceneFormatError(f"{manifest_path}: bad analytic block ({exc!r})") from exc
        return DensityScene(
            density=root,
            radius=radius,
            cameras=cameras,
            emission=root if has_color(root) else None,
            name=scene_dir.name,
        )
    raise SceneFormatError(f"{manifest_path}: needs a 'grid' or 'analytic' block")


def save_distilled(scene_dir, distilled: DistilledScene) -> None:
    scene_dir = Path(scene_dir)
    surface = distilled.surface
    nx, ny, nz = surface.resolution
    write_raw_grid(scene_dir / SURFACE_RAW, surface.values)
    levels = []
    for k, sf in enumerate(distilled.fields):
        fname = f"smooth_{k}.raw"
        write_raw_grid(scene_dir / fname, sf.grid.values)
        levels.append(
            {"sigma": sf.sigma, "n": distilled.n_samples, "seed": distilled.seed,
             "method": distilled.method, "file": fname}
        )
    atomic_write_json(
        scene_dir / SURFACE_MANIFEST,
        {
            "epsilon": surface.epsilon,
            "delta": surface.delta,
            "resolution": [nx, ny, nz],
            "origin": surface.grid.origin.tolist(),
            "spacing": surface.grid.spacing.tolist(),
            "surface_file": SURFACE_RAW,
            "levels": levels,
        },
    )


def load_distilled(scene_dir) -> DistilledScene | None:
    scene_dir = Path(scene_dir)
    manifest_path = scene_dir / SURFACE_MANIFEST
    if not manifest_path.exists():
        return None
    manifest = json.loads(manifest_path.read_text())
    res = tuple(int(n) for n in manifest["resolution"])
    origin = np.asarray(manifest["origin"], dtype=np.float64)
    spacing = np.asarray(manifest["spacing"], dtype=np.float64)
    surface = SurfaceFieldGrid(
        grid=GridField(read_raw_grid(scene_dir / manifest["surface_file"], res), origin, spacing),
        epsilon=float(manifest["epsilon"]),
        delta=float(manifest["delta"]),
    )
    fields = []
    seed = 0
    n = 64
    method = "conv"
    for level in manifest["levels"]:
        values = read_raw_grid(scene_dir / level["file"], res)
        fields.append(SmoothedField(grid=GridField(values, origin, spacing), sigma=float(level["sigma"])))
        seed = int(level.get("seed", 0))
        n = int(level.get("n", 64))
        method = level.get("method", "conv")
    return DistilledScene(surface=surface, fields=fields, seed=seed, n_samples=n, method=method)


def distilled_matches(
    distilled: DistilledScene, resolution, delta: float, epsilon: float, levels, seed: int
) -> bool:
    """True when cached distillation covers the requested parameters."""
    res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
    if tuple(distilled.surface.resolution) != tuple(int(n) for n in res):
        return False
    if abs(distilled.surface.delta - delta) > 1e-12 or abs(distilled.surface.epsilon - epsilon) > 1e-12:
        return False
    if distilled.seed != seed:
        return False
    have = sorted(f.sigma for f in distilled.fields)
    want = sorted(float(s) for s in levels)
    return len(have) == len(want) and all(abs(a - b) < 1e-9 for a, b in zip(have, want))


# --- keypoints --------------------------------------------------------------


def save_keypoints(path, data: dict) -> None:
    atomic_write_json(path, data)


def load_keypoints(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise SceneFormatError(f"missing keypoint file {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: invalid JSON ({exc})") from exc
    if "points" not in data and "keypoints" not in data:
        raise SceneFormatError(f"{path}: needs 'points' or 'keypoints'")
    return data


def keypoints_to_points(data: dict, cameras) -> np.ndarray:
    """Resolve a keypoint file to 3D points, triangulating 2D clicks."""
    from .geometry import triangulate_keypoints

    if "points" in data:
        return np.asarray(data["points"], dtype=np.float64)
    groups = []
    for kp in data["keypoints"]:
        groups.append([(c["view_id"], c["u"], c["v"]) for c in kp["clicks"]])
    return np.asarray(triangulate_keypoints(groups, cameras))


# --- images and point clouds -------------------------------------------------


def write_png(path, rgb: np.ndarray) -> None:
    """RGB floats in [0, 1] to an 8-bit PNG (atomic)."""
    img = Image.fromarray((np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))
    import io as _io

    buf = _io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def write_pfm(path, image: np.ndarray) -> None:
    """Single-channel PFM, little-endian, NaN kept for invalid pixels."""
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("PFM writer expects a single-channel image")
    header = b"Pf\n" + f"{arr.shape[1]} {arr.shape[0]}\n".encode() + b"-1.0\n"
    # PFM stores rows bottom-to-top
    atomic_write_bytes(path, header + arr[::-1].tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise SceneFormatError(f"{path}: not a single-channel PFM")
        width, height = (int(v) for v in fh.readline().split())
        scale = float(fh.readline())
        data = np.fromfile(fh, dtype="<f4" if scale < 0 else ">f4", count=width * height)
    return data.reshape(height, width)[::-1].astype(np.float64)


def write_ply(path, points: np.ndarray) -> None:
    """ASCII PLY point cloud for external registration tools."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    body = "\n".join(lines) + "\n" + "\n".join(f"{p[0]:.8g} {p[1]:.8g} {p[2]:.8g}" for p in pts)
    atomic_write_bytes(path, (body + "\n").encode())


def save_transform_json(path, transform: RigidTransform, restart_summaries, chosen_restart: int) -> None:
    atomic_write_json(
        path,
        {
            "transform": transform.matrix().tolist(),
            "restart_traces": restart_summaries,
            "chosen_restart": chosen_restart,
        },
    )


def load_transform_json(path) -> RigidTransform:
    data = json.loads(Path(path).read_text())
    return RigidTransform.from_matrix(np.asarray(data["transform"], dtype=np.float64))
