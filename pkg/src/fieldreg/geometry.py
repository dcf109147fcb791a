"""SE(3) transforms, rays, pinhole cameras, triangulation, and shape matching.

Conventions used throughout the package:

* A rigid transform acts on points as ``apply(x) = R @ x + t``.
* The registration transform maps scene-B coordinates into scene-A
  coordinates, i.e. ``q_a ~ T(q_b)`` for corresponding keypoints.
* Rotations are parameterized for optimization as an axis-angle vector
  (exponential map), canonicalized to ``norm <= pi``.
* Cameras follow the computer-vision frame: +x right, +y down, +z forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateConfiguration, InsufficientViews, ParallelRays
from .validation import check_points, check_rotation, check_vector3

_SMALL_ANGLE = 1e-8


def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat(v) @ w == cross(v, w)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(omega) -> np.ndarray:
    """Rodrigues formula: exponential map from an axis-angle 3-vector."""
    omega = check_vector3(omega, "axis_angle")
    theta = np.linalg.norm(omega)
    w = hat(omega)
    if theta < _SMALL_ANGLE:
        # second-order series, exact enough below the cutoff
        return np.eye(3) + w + 0.5 * (w @ w)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * w + b * (w @ w)


def axis_angle_from_rotation(rotation) -> np.ndarray:
    """Log map: axis-angle vector with norm in [0, pi] for a rotation matrix."""
    r = check_rotation(rotation)
    trace = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(trace)
    if theta < _SMALL_ANGLE:
        return np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]]) / 2.0
    if math.pi - theta < 1e-4:
        # near pi the antisymmetric part degrades; use the symmetric part
        m = (r + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(m), 0.0, None))
        k = int(np.argmax(axis))
        axis = m[:, k] / max(axis[k], 1e-12)
        axis /= np.linalg.norm(axis)
        # fix the sign using the antisymmetric part when it is not exactly zero
        v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        if np.dot(axis, v) < 0:
            axis = -axis
        return theta * axis
    v = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return theta / (2.0 * math.sin(theta)) * v


def so3_right_jacobian(omega: np.ndarray) -> np.ndarray:
    """Right Jacobian of SO(3), relating parameter increments to body rotations."""
    theta = np.linalg.norm(omega)
    w = hat(omega)
    ww = w @ w
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * w + ww / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) - a * w + b * ww


def rotate_with_jacobian(omega: np.ndarray, points: np.ndarray):
    """Rotate points by R(omega) and return d(R(omega) x)/d(omega).

    Returns (rotated (N,3), jacobian (N,3,3)); jacobian[i] maps a small
    change in omega to the displacement of rotated point i.
    """
    r = rotation_from_axis_angle(omega)
    jr = so3_right_jacobian(omega)
    rotated = points @ r.T
    # d(R v)/d(omega) = -R hat(v) Jr
    hats = np.zeros((points.shape[0], 3, 3))
    hats[:, 0, 1] = -points[:, 2]
    hats[:, 0, 2] = points[:, 1]
    hats[:, 1, 0] = points[:, 2]
    hats[:, 1, 2] = -points[:, 0]
    hats[:, 2, 0] = -points[:, 1]
    hats[:, 2, 1] = points[:, 0]
    jac = -np.einsum("ab,nbc,cd->nad", r, hats, jr)
    return rotated, jac


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion x -> R x + t with R orthonormal, det +1."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = check_rotation(self.rotation)
        t = check_vector3(self.translation, "translation")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> "RigidTransform":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points):
        """Apply to a single point (3,) or an array of points (N, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            return self.rotation @ pts + self.translation
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying b first, then a: compose(a, b)(x) == a(b(x))."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


@dataclass(frozen=True)
class PoseParams:
    """Unconstrained pose parameterization: axis-angle rotation + translation."""

    axis_angle: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "axis_angle", check_vector3(self.axis_angle, "axis_angle"))
        object.__setattr__(self, "translation", check_vector3(self.translation, "translation"))

    @classmethod
    def identity(cls) -> "PoseParams":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_transform(cls, transform: RigidTransform) -> "PoseParams":
        return cls(axis_angle_from_rotation(transform.rotation), transform.translation.copy())

    def to_transform(self) -> RigidTransform:
        return RigidTransform(rotation_from_axis_angle(self.axis_angle), self.translation)

    def canonicalized(self) -> "PoseParams":
        """Wrap the rotation vector so its norm lies in [0, pi]."""
        omega = self.axis_angle.copy()
        theta = np.linalg.norm(omega)
        if theta > math.pi:
            wrapped = theta % (2.0 * math.pi)
            if wrapped > math.pi:
                wrapped -= 2.0 * math.pi  # negative: flips the axis
            omega = omega * (wrapped / theta)
        return PoseParams(omega, self.translation)


@dataclass(frozen=True)
class Ray:
    """Half-line from ``origin`` along the unit vector ``direction``."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        origin = check_vector3(self.origin, "origin")
        direction = check_vector3(self.direction, "direction")
        norm = np.linalg.norm(direction)
        if norm < 1e-12:
            raise ValueError("ray direction has zero length")
        direction = direction / norm
        origin.flags.writeable = False
        direction.flags.writeable = False
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    @classmethod
    def through(cls, origin, target) -> "Ray":
        origin = check_vector3(origin, "origin")
        target = check_vector3(target, "target")
        return cls(origin, target - origin)

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction if t.ndim else self.origin + t * self.direction


@dataclass(frozen=True)
class PinholeCamera:
    """Calibrated pinhole camera. Pixel (u, v) has u along +x, v along +y (down)."""

    world_from_camera: RigidTransform
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @property
    def origin(self) -> np.ndarray:
        return self.world_from_camera.translation

    def pixel_to_ray(self, u: float, v: float) -> Ray:
        """World-space ray through pixel (u, v)."""
        d_cam = np.array([(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0])
        d_world = self.world_from_camera.rotation @ d_cam
        return Ray(self.origin, d_world)

    def project(self, points):
        """Project world points to pixels.

        Returns (uv (N,2), depth (N,)); depth is the camera-frame z, and
        points behind the camera get depth <= 0.
        """
        pts = check_points(points, "points")
        cam = self.world_from_camera.inverse().apply(pts)
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z

    def contains_pixel(self, u, v) -> np.ndarray:
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= 0) & (u <= self.width - 1) & (v >= 0) & (v <= self.height - 1)

    @classmethod
    def look_at(
        cls,
        position,
        target,
        fx: float = 400.0,
        fy: float | None = None,
        width: int = 400,
        height: int = 400,
        up=(0.0, 0.0, 1.0),
    ) -> "PinholeCamera":
        """Camera at ``position`` looking toward ``target``."""
        position = check_vector3(position, "position")
        target = check_vector3(target, "target")
        up = check_vector3(up, "up")
        forward = target - position
        norm = np.linalg.norm(forward)
        if norm < 1e-12:
            raise ValueError("camera position coincides with target")
        z = forward / norm
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-8:  # looking straight along up
            x = np.cross(z, np.array([1.0, 0.0, 0.0]))
            if np.linalg.norm(x) < 1e-8:
                x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z], axis=1)
        if fy is None:
            fy = fx
        return cls(
            world_from_camera=RigidTransform(rot, position),
            fx=float(fx),
            fy=float(fy),
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
            width=int(width),
            height=int(height),
        )


def triangulate(ray_a: Ray, ray_b: Ray):
    """Midpoint and length of the common perpendicular segment of two rays.

    Raises ParallelRays when the directions are (anti)parallel.
    """
    da, db = ray_a.direction, ray_b.direction
    b = float(np.dot(da, db))
    if abs(b) > 1.0 - 1e-9:
        raise ParallelRays(f"|cos angle| = {abs(b):.12f}")
    w0 = ray_a.origin - ray_b.origin
    d = float(np.dot(da, w0))
    e = float(np.dot(db, w0))
    denom = 1.0 - b * b
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    pa = ray_a.origin + s * da
    pb = ray_b.origin + t * db
    return (pa + pb) / 2.0, float(np.linalg.norm(pa - pb))


def triangulate_rays(rays) -> np.ndarray:
    """Least-squares point minimizing the sum of squared distances to the rays.

    For two rays this coincides with the common-perpendicular midpoint.
    """
    rays = list(rays)
    if len(rays) < 2:
        raise InsufficientViews(f"need >= 2 rays, got {len(rays)}")
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for ray in rays:
        p = np.eye(3) - np.outer(ray.direction, ray.direction)
        a += p
        b += p @ ray.origin
    # all-parallel bundles make `a` rank deficient
    eigvals = np.linalg.eigvalsh(a)
    if eigvals[0] < 1e-9 * max(eigvals[-1], 1.0):
        raise ParallelRays("ray bundle is parallel; point is not observable")
    return np.linalg.solve(a, b)


def triangulate_keypoints(clicks, cameras) -> list[np.ndarray]:
    """Triangulate 2D keypoint annotations to 3D points.

    ``clicks`` groups pixel annotations per keypoint: a list where each
    element is a list of (view_id, u, v) for one keypoint. Every keypoint
    needs clicks in at least two distinct views.
    """
    points = []
    for i, group in enumerate(clicks):
        views = {int(view_id) for view_id, _, _ in group}
        if len(views) < 2:
            raise InsufficientViews(f"keypoint {i} is annotated in {len(views)} view(s), need >= 2")
        rays = []
        for view_id, u, v in group:
            view_id = int(view_id)
            if view_id < 0 or view_id >= len(cameras):
                raise IndexError(f"keypoint {i} references unknown view {view_id}")
            rays.append(cameras[view_id].pixel_to_ray(float(u), float(v)))
        points.append(triangulate_rays(rays))
    return points


def closed_form_alignment(q_a, q_b) -> RigidTransform:
    """Closed-form rigid alignment minimizing sum ||q_a - (R q_b + t)||^2.

    Kabsch/Horn shape matching over corresponding point sets; serves as the
    oracle for the keypoint-only optimization.
    """
    pa = check_points(q_a, "q_a")
    pb = check_points(q_b, "q_b")
    if pa.shape != pb.shape:
        raise ValueError(f"point sets differ in shape: {pa.shape} vs {pb.shape}")
    if pa.shape[0] < 3:
        raise ValueError(f"need >= 3 correspondences, got {pa.shape[0]}")
    mu_a = pa.mean(axis=0)
    mu_b = pb.mean(axis=0)
    h = (pb - mu_b).T @ (pa - mu_a)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= 1e-9 * max(s[0], 1e-12):
        raise DegenerateConfiguration("correspondences are (near-)collinear")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, mu_a - rot @ mu_b)
