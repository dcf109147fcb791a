"""Registration quality metrics: translation/rotation RMSE and 3D-ADD."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist
from scipy.spatial.transform import Rotation

from .exceptions import EmptyMesh, GimbalWarning, ZeroDiameter
from .geometry import RigidTransform
from .validation import check_points

EULER_CONVENTION = "XYZ-intrinsic"
_GIMBAL_ATOL_DEG = 1e-3


@dataclass(frozen=True)
class PoseError:
    delta_t: float
    delta_r: float
    add3d: float | None = None

    def to_dict(self) -> dict:
        out = {"delta_t": self.delta_t, "delta_R": self.delta_r, "convention": EULER_CONVENTION}
        if self.add3d is not None:
            out["add3d"] = self.add3d
        return out


def euler_xyz_degrees(rotation: np.ndarray) -> np.ndarray:
    """Intrinsic-XYZ Euler angles of a rotation matrix, in degrees."""
    return Rotation.from_matrix(rotation).as_euler("XYZ", degrees=True)


def pose_error(pred: RigidTransform, gt: RigidTransform) -> tuple[float, float]:
    """(delta_t, delta_R): RMSE of translation components and Euler angles.

    The rotation residual is pred @ gt^T decomposed as intrinsic-XYZ Euler
    angles in degrees. A GimbalWarning is emitted when the pitch sits at
    the decomposition's singularity, where angle RMSE is ill-conditioned.
    """
    dt = pred.translation - gt.translation
    delta_t = float(np.sqrt(np.mean(dt**2)))
    angles = euler_xyz_degrees(pred.rotation @ gt.rotation.T)
    if abs(abs(angles[1]) - 90.0) < _GIMBAL_ATOL_DEG:
        warnings.warn("rotation residual near gimbal lock; delta_R is ill-conditioned", GimbalWarning)
    delta_r = float(np.sqrt(np.mean(angles**2)))
    return delta_t, delta_r


def _diameter(vertices: np.ndarray) -> float:
    pts = vertices
    if len(pts) > 3000:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pts = pts[:: max(1, len(pts) // 3000)]
    return float(pdist(pts).max())


def add3d(vertices, pred: RigidTransform, gt: RigidTransform) -> float:
    """Mean vertex displacement between the two poses over the diameter.

    Vertices are posed by both transforms; the average corresponding-point
    distance is normalized by the object's max pairwise vertex distance.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    if verts.size == 0:
        raise EmptyMesh("3D-ADD needs at least one vertex")
    verts = check_points(verts, "vertices")
    if len(verts) < 2:
        raise ZeroDiameter("3D-ADD needs a non-degenerate vertex set")
    diameter = _diameter(verts)
    if diameter <= 0.0:
        raise ZeroDiameter("all vertices coincide")
    disp = np.linalg.norm(pred.apply(verts) - gt.apply(verts), axis=1)
    return float(disp.mean() / diameter)


def evaluate(pred: RigidTransform, gt: RigidTransform, vertices=None) -> PoseError:
    delta_t, delta_r = pose_error(pred, gt)
    add = add3d(vertices, pred, gt) if vertices is not None else None
    return PoseError(delta_t=delta_t, delta_r=delta_r, add3d=add)


def report_table(rows: list[dict]) -> str:
    """Plain-text table of metrics, translation and ADD scaled by 10^2."""
    header = f"{'object':<16}{'10^2*dt':>10}{'dR[deg]':>10}{'10^2*ADD':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        add = row.get("add3d")
        lines.append(
            f"{row.get('object', '?'):<16}"
            f"{100 * row['delta_t']:>10.2f}"
            f"{row['delta_R']:>10.2f}"
            + (f"{100 * add:>10.2f}" if add is not None else f"{'-':>10}")
        )
    return "\n".join(lines)
