"""Command-line entry points.

Exit codes: 2 malformed scene/manifest, 3 I/O failure, 4 keypoint mismatch,
5 all restarts hit non-finite losses.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import sceneio
from .exceptions import KeypointMismatch, NonFiniteLoss, SceneFormatError
from .fields import DEFAULT_DELTA, DEFAULT_EPSILON, DEFAULT_RESOLUTION, export_point_cloud, render
from .geometry import PinholeCamera
from .metrics import evaluate, report_table
from .pipeline import plan_levels, prepare_scene
from .registration import KeypointSet, RegistrationConfig, register_restarts

EXIT_BAD_MANIFEST = 2
EXIT_IO = 3
EXIT_KEYPOINT_MISMATCH = 4
EXIT_NON_FINITE = 5


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_scene(scene_dir):
    try:
        return sceneio.load_scene(scene_dir)
    except SceneFormatError as exc:
        _fail(EXIT_BAD_MANIFEST, str(exc))
    except OSError as exc:
        _fail(EXIT_IO, str(exc))


def _parse_sigmas(text: str) -> list[float]:
    try:
        sigmas = [float(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise click.BadParameter(f"cannot parse sigma list {text!r}")
    if not sigmas:
        raise click.BadParameter("need at least one sigma")
    return sigmas


@click.group()
def main():
    """Register volumetric density fields via surface-field matching."""


@main.command()
@click.argument("scene_dir", type=click.Path(file_okay=False))
@click.option("--resolution", default=DEFAULT_RESOLUTION, show_default=True)
@click.option("--delta", default=DEFAULT_DELTA, show_default=True)
@click.option("--epsilon", default=DEFAULT_EPSILON, show_default=True)
@click.option("--sigmas", default="0.1,0.05", show_default=True, help="comma-separated smoothing levels")
@click.option("--seed", default=0, show_default=True)
@click.option("--samples", default=64, show_default=True, help="MC samples per node (mc method)")
@click.option("--method", default="conv", type=click.Choice(["conv", "mc"]), show_default=True)
@click.option("--step", default=None, type=float, help="quadrature step (default radius/256)")
def distill(scene_dir, resolution, delta, epsilon, sigmas, seed, samples, method, step):
    """Extract the surface field and write smoothed grids to the scene dir."""
    scene = _load_scene(scene_dir)
    levels = _parse_sigmas(sigmas)
    distilled = prepare_scene(
        scene, levels, resolution=resolution, delta=delta, epsilon=epsilon,
        step=step, n=samples, seed=seed, method=method,
    )
    try:
        sceneio.save_distilled(scene_dir, distilled)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(f"distilled {scene_dir}: surface {resolution}^3, levels {levels}")


def _load_pair_keypoints(path, scene_a, scene_b):
    try:
        data = sceneio.load_keypoints(path)
    except SceneFormatError:
        # pair file: {"scene_a": {...}, "scene_b": {...}}
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            _fail(EXIT_BAD_MANIFEST, f"cannot read keypoints {path}: {exc}")
    if "scene_a" in data and "scene_b" in data:
        q_a = sceneio.keypoints_to_points(data["scene_a"], scene_a.cameras)
        q_b = sceneio.keypoints_to_points(data["scene_b"], scene_b.cameras)
        return q_a, q_b
    _fail(EXIT_BAD_MANIFEST, f"{path}: expected top-level 'scene_a' and 'scene_b'")


def _ensure_distilled(scene_dir, scene, levels, resolution, delta, epsilon, seed):
    cached = None
    try:
        cached = sceneio.load_distilled(scene_dir)
    except (SceneFormatError, OSError):
        cached = None
    if cached is not None and sceneio.distilled_matches(cached, resolution, delta, epsilon, levels, seed):
        return cached
    distilled = prepare_scene(
        scene, levels, resolution=resolution, delta=delta, epsilon=epsilon, seed=seed
    )
    try:
        sceneio.save_distilled(scene_dir, distilled)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    return distilled


@main.command()
@click.argument("scene_a_dir", type=click.Path(file_okay=False))
@click.argument("scene_b_dir", type=click.Path(file_okay=False))
@click.argument("keypoints_file", type=click.Path(dir_okay=False))
@click.option("--config", "config_path", default=None, type=click.Path(dir_okay=False),
              help="JSON file with RegistrationConfig overrides")
@click.option("--restarts", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--trace", "trace_path", default=None, type=click.Path(dir_okay=False),
              help="write the chosen restart's trace as JSON lines")
@click.option("--out", "out_path", default="transform.json", show_default=True)
@click.option("--resolution", default=DEFAULT_RESOLUTION, show_default=True)
@click.option("--delta", default=DEFAULT_DELTA, show_default=True)
@click.option("--epsilon", default=DEFAULT_EPSILON, show_default=True)
@click.option("--partial", is_flag=True, help="partial-object profile (finer sigmas, smaller steps)")
def register(scene_a_dir, scene_b_dir, keypoints_file, config_path, restarts, seed,
             trace_path, out_path, resolution, delta, epsilon, partial):
    """Register scene B onto scene A from annotated keypoint pairs."""
    scene_a = _load_scene(scene_a_dir)
    scene_b = _load_scene(scene_b_dir)
    q_a, q_b = _load_pair_keypoints(keypoints_file, scene_a, scene_b)

    overrides = {}
    if config_path:
        try:
            overrides = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            _fail(EXIT_BAD_MANIFEST, f"bad config file: {exc}")
    overrides.setdefault("restarts", restarts)
    overrides.setdefault("seed", seed)
    try:
        config = RegistrationConfig.partial_object(**overrides) if partial else RegistrationConfig(**overrides)
    except TypeError as exc:
        _fail(EXIT_BAD_MANIFEST, f"bad config override: {exc}")

    try:
        keypoints = KeypointSet(q_a, q_b)
    except KeypointMismatch as exc:
        _fail(EXIT_KEYPOINT_MISMATCH, str(exc))

    levels = plan_levels(config, keypoints)
    da = _ensure_distilled(scene_a_dir, scene_a, levels, resolution, delta, epsilon, config.seed)
    db = _ensure_distilled(scene_b_dir, scene_b, levels, resolution, delta, epsilon, config.seed)

    try:
        result, summaries = register_restarts(
            da.fields, db.fields, keypoints, config, radius=scene_a.radius
        )
    except NonFiniteLoss as exc:
        _fail(EXIT_NON_FINITE, str(exc))

    chosen = result.seed - config.seed
    try:
        sceneio.save_transform_json(out_path, result.transform, summaries, chosen)
        if trace_path:
            lines = "\n".join(json.dumps(r.to_json_dict()) for r in result.trace)
            sceneio.atomic_write_bytes(trace_path, (lines + "\n").encode())
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(f"wrote {out_path} (restart {chosen}, final loss {result.final_total_loss:.6g})")


def _camera_with_width(cam: PinholeCamera, width: int | None) -> PinholeCamera:
    if width is None or width == cam.width:
        return cam
    scale = width / cam.width
    return PinholeCamera(
        world_from_camera=cam.world_from_camera,
        fx=cam.fx * scale,
        fy=cam.fy * scale,
        cx=(cam.cx + 0.5) * scale - 0.5,
        cy=(cam.cy + 0.5) * scale - 0.5,
        width=int(width),
        height=max(1, round(cam.height * scale)),
    )


@main.command("render")
@click.argument("scene_dir", type=click.Path(file_okay=False))
@click.option("--view", default=0, show_default=True)
@click.option("--width", default=None, type=int, help="rescale the view to this width")
@click.option("--out", "out_path", default="render.png", show_default=True)
@click.option("--depth", "depth_path", default=None, type=click.Path(dir_okay=False),
              help="also write the expected-depth image as PFM")
@click.option("--step", default=None, type=float)
def render_cmd(scene_dir, view, width, out_path, depth_path, step):
    """Render a calibrated view to PNG (plus optional depth PFM)."""
    scene = _load_scene(scene_dir)
    if view < 0 or view >= len(scene.cameras):
        _fail(EXIT_BAD_MANIFEST, f"view {view} out of range (scene has {len(scene.cameras)} views)")
    cam = _camera_with_width(scene.cameras[view], width)
    result = render(scene, cam, step=step)
    rgb = result.rgb
    if rgb is None:
        # no emission: show opacity as a grayscale stand-in
        gray = np.clip(result.opacity, 0.0, 1.0)
        rgb = np.stack([1.0 - gray] * 3, axis=-1)
    try:
        sceneio.write_png(out_path, rgb)
        if depth_path:
            sceneio.write_pfm(depth_path, result.depth)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(f"wrote {out_path}")


@main.command("eval")
@click.argument("pred_transform", type=click.Path(dir_okay=False))
@click.argument("gt_transform", type=click.Path(dir_okay=False))
@click.option("--vertices", "vertices_path", default=None, type=click.Path(dir_okay=False),
              help="JSON file {'points': [[x,y,z],...]} for 3D-ADD")
@click.option("--object", "object_name", default="object", show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
def eval_cmd(pred_transform, gt_transform, vertices_path, object_name, out_path):
    """Compare a recovered transform against ground truth."""
    try:
        pred = sceneio.load_transform_json(pred_transform)
        gt = sceneio.load_transform_json(gt_transform)
        vertices = None
        if vertices_path:
            vertices = np.asarray(json.loads(Path(vertices_path).read_text())["points"], dtype=np.float64)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        _fail(EXIT_BAD_MANIFEST, f"cannot read inputs: {exc}")
    err = evaluate(pred, gt, vertices=vertices)
    report = {"object": object_name, **err.to_dict()}
    click.echo(report_table([report]))
    click.echo(json.dumps(report))
    if out_path:
        try:
            sceneio.atomic_write_json(out_path, report)
        except OSError as exc:
            _fail(EXIT_IO, str(exc))


@main.command("export-pointcloud")
@click.argument("scene_dir", type=click.Path(file_okay=False))
@click.option("--out", "out_path", default="cloud.ply", show_default=True)
@click.option("--crop-keypoints", "crop_path", default=None, type=click.Path(dir_okay=False),
              help="keypoint file; crop to its bounding box plus padding")
@click.option("--crop-pad", default=0.1, show_default=True)
@click.option("--opacity-min", default=1e-3, show_default=True)
@click.option("--step", default=None, type=float)
def export_pointcloud(scene_dir, out_path, crop_path, crop_pad, opacity_min, step):
    """Back-project expected depth into a point cloud (ASCII PLY)."""
    scene = _load_scene(scene_dir)
    crop_min = crop_max = None
    if crop_path:
        try:
            data = sceneio.load_keypoints(crop_path)
        except SceneFormatError as exc:
            _fail(EXIT_BAD_MANIFEST, str(exc))
        pts = sceneio.keypoints_to_points(data, scene.cameras)
        crop_min = pts.min(axis=0) - crop_pad
        crop_max = pts.max(axis=0) + crop_pad
    cloud = export_point_cloud(scene, step=step, opacity_min=opacity_min, crop_min=crop_min, crop_max=crop_max)
    try:
        sceneio.write_ply(out_path, cloud)
    except OSError as exc:
        _fail(EXIT_IO, str(exc))
    click.echo(f"wrote {out_path} ({len(cloud)} points)")


@main.command()
@click.option("--port", default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--scenes", "scenes_root", default=None, type=click.Path(file_okay=False),
              help="scenes root (default: $FIELDREG_SCENES or cwd)")
def serve(port, host, scenes_root):
    """Serve the annotation/registration HTTP API."""
    import os

    import uvicorn

    from .service import create_app

    root = scenes_root or os.environ.get("FIELDREG_SCENES") or "."
    uvicorn.run(create_app(Path(root)), host=host, port=port)


if __name__ == "__main__":
    main()
