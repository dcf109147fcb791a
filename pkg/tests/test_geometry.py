import math

import numpy as np
import pytest

from fieldreg.exceptions import DegenerateConfiguration, InsufficientViews, ParallelRays
from fieldreg.geometry import (
    PinholeCamera,
    PoseParams,
    Ray,
    RigidTransform,
    axis_angle_from_rotation,
    closed_form_alignment,
    compose,
    rotate_with_jacobian,
    rotation_from_axis_angle,
    triangulate,
    triangulate_keypoints,
    triangulate_rays,
)


def random_transform(rng, max_angle=math.pi * 0.9, scale=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    omega = axis * rng.uniform(0, max_angle)
    return RigidTransform(rotation_from_axis_angle(omega), rng.normal(scale=scale, size=3))


class TestRigidTransform:
    def test_identity_roundtrip(self):
        t = RigidTransform.identity()
        p = np.array([1.0, -2.0, 3.0])
        np.testing.assert_allclose(t.apply(p), p)

    def test_compose_identity(self):
        i = RigidTransform.identity()
        c = compose(i, i)
        np.testing.assert_allclose(c.matrix(), np.eye(4))

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        t = random_transform(rng)
        c = compose(t, t.inverse())
        np.testing.assert_allclose(c.matrix(), np.eye(4), atol=1e-9)

    def test_compose_hand_example(self):
        # a = Rz(90 deg), b = translate(1,0,0): a(b(0)) = a((1,0,0)) = (0,1,0)
        a = RigidTransform(rotation_from_axis_angle([0, 0, math.pi / 2]), np.zeros(3))
        b = RigidTransform(np.eye(3), np.array([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(compose(a, b).apply(np.zeros(3)), [0.0, 1.0, 0.0], atol=1e-12)

    def test_compose_matches_sequential_apply(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = random_transform(rng), random_transform(rng)
            x = rng.normal(size=3)
            np.testing.assert_allclose(compose(a, b).apply(x), a.apply(b.apply(x)), atol=1e-9)

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))
        with pytest.raises(ValueError):
            RigidTransform(-np.eye(3), np.zeros(3))  # det -1

    def test_batch_apply(self):
        rng = np.random.default_rng(2)
        t = random_transform(rng)
        pts = rng.normal(size=(10, 3))
        batched = t.apply(pts)
        for i in range(10):
            np.testing.assert_allclose(batched[i], t.apply(pts[i]))


class TestPoseParams:
    def test_exponential_map_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            t = random_transform(rng, max_angle=math.pi - 1e-3)
            back = PoseParams.from_transform(t).to_transform()
            np.testing.assert_allclose(back.matrix(), t.matrix(), atol=1e-8)

    def test_small_angle(self):
        omega = np.array([1e-10, 0, 0])
        r = rotation_from_axis_angle(omega)
        np.testing.assert_allclose(axis_angle_from_rotation(r), omega, atol=1e-15)

    def test_near_pi(self):
        axis = np.array([1.0, 2.0, -0.5])
        axis /= np.linalg.norm(axis)
        omega = axis * (math.pi - 1e-7)
        r = rotation_from_axis_angle(omega)
        r2 = rotation_from_axis_angle(axis_angle_from_rotation(r))
        np.testing.assert_allclose(r2, r, atol=1e-6)

    def test_canonicalize_wraps_to_pi(self):
        omega = np.array([0.0, 0.0, 1.5 * math.pi])
        p = PoseParams(omega, np.zeros(3)).canonicalized()
        assert np.linalg.norm(p.axis_angle) <= math.pi + 1e-12
        np.testing.assert_allclose(
            p.to_transform().rotation, rotation_from_axis_angle(omega), atol=1e-12
        )

    def test_rotation_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            omega = rng.normal(size=3)
            pts = rng.normal(size=(4, 3))
            _, jac = rotate_with_jacobian(omega, pts)
            eps = 1e-6
            for k in range(3):
                d = np.zeros(3)
                d[k] = eps
                plus = pts @ rotation_from_axis_angle(omega + d).T
                minus = pts @ rotation_from_axis_angle(omega - d).T
                fd = (plus - minus) / (2 * eps)
                np.testing.assert_allclose(jac[:, :, k], fd, atol=1e-5)


class TestTriangulate:
    def test_intersecting_rays(self):
        p = np.array([1.0, 2.0, 3.0])
        ra = Ray.through([0, 0, 0], p)
        rb = Ray.through([5, 0, 0], p)
        point, gap = triangulate(ra, rb)
        np.testing.assert_allclose(point, p, atol=1e-12)
        assert gap == pytest.approx(0.0, abs=1e-12)

    def test_skew_rays_oracle(self):
        # brute-force oracle: min over (s, t) of |ra(s) - rb(t)|^2 gives
        # closest points (0,0,0) and (0,0,1) -> midpoint (0,0,0.5), gap 1
        ra = Ray([0, 0, 0], [1, 0, 0])
        rb = Ray([0, 1, 1], [0, 1, 0])
        point, gap = triangulate(ra, rb)
        np.testing.assert_allclose(point, [0.0, 0.0, 0.5], atol=1e-12)
        assert gap == pytest.approx(1.0, abs=1e-12)

    def test_matches_brute_force_on_random_rays(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            ra = Ray(rng.normal(size=3), rng.normal(size=3))
            rb = Ray(rng.normal(size=3), rng.normal(size=3))
            if abs(np.dot(ra.direction, rb.direction)) > 0.99:
                continue
            point, gap = triangulate(ra, rb)
            # dense scan oracle over both ray parameters
            s = np.linspace(-10, 10, 2001)
            pa = ra.origin + s[:, None] * ra.direction
            pb = rb.origin + s[:, None] * rb.direction
            d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
            assert gap <= math.sqrt(d2.min()) + 1e-6

    def test_symmetry(self):
        ra = Ray([0, 0, 0], [1, 0, 0])
        rb = Ray([0, 1, 1], [0, 1, 0])
        p1, g1 = triangulate(ra, rb)
        p2, g2 = triangulate(rb, ra)
        np.testing.assert_allclose(p1, p2, atol=1e-12)
        assert g1 == pytest.approx(g2, abs=1e-12)

    def test_parallel_raises(self):
        ra = Ray([0, 0, 0], [1, 0, 0])
        rb = Ray([0, 1, 0], [1, 0, 0])
        with pytest.raises(ParallelRays):
            triangulate(ra, rb)

    def test_antiparallel_raises(self):
        ra = Ray([0, 0, 0], [1, 0, 0])
        rb = Ray([0, 1, 0], [-1, 0, 0])
        with pytest.raises(ParallelRays):
            triangulate(ra, rb)


def ring_cameras(n=4, radius=3.0, height=1.5, target=(0, 0, 0), **kw):
    cams = []
    for k in range(n):
        ang = 2 * math.pi * k / n
        pos = np.array([radius * math.cos(ang), radius * math.sin(ang), height])
        cams.append(PinholeCamera.look_at(pos, target, **kw))
    return cams


class TestCameras:
    def test_pixel_ray_roundtrip(self):
        cams = ring_cameras(3)
        rng = np.random.default_rng(6)
        for cam in cams:
            for _ in range(20):
                u = rng.uniform(0, cam.width - 1)
                v = rng.uniform(0, cam.height - 1)
                ray = cam.pixel_to_ray(u, v)
                p = ray.at(rng.uniform(0.5, 5.0))
                uv, z = cam.project(p[None, :])
                assert z[0] > 0
                np.testing.assert_allclose(uv[0], [u, v], atol=1e-6)

    def test_projection_of_target_is_principal_point(self):
        cam = PinholeCamera.look_at([3, 0, 1], [0, 0, 0], width=101, height=81)
        uv, z = cam.project(np.zeros((1, 3)))
        np.testing.assert_allclose(uv[0], [50.0, 40.0], atol=1e-9)
        assert z[0] == pytest.approx(math.sqrt(10.0))


class TestTriangulateKeypoints:
    def test_projected_point_recovered(self):
        cams = ring_cameras(3)
        p = np.array([0.2, -0.1, 0.3])
        clicks = []
        for vid in (0, 1):
            uv, _ = cams[vid].project(p[None, :])
            clicks.append((vid, uv[0, 0], uv[0, 1]))
        points = triangulate_keypoints([clicks], cams)
        np.testing.assert_allclose(points[0], p, atol=1e-6)

    def test_single_view_raises(self):
        cams = ring_cameras(2)
        with pytest.raises(InsufficientViews):
            triangulate_keypoints([[(0, 10.0, 10.0), (0, 12.0, 10.0)]], cams)

    def test_three_views_with_noise(self):
        # Monte-Carlo oracle: 0.5 px click noise at ~3 units distance and
        # fx=400 maps to roughly 0.5/400*3 ~ 4e-3 units of ray error; the
        # least-squares point stays within a small multiple of that.
        cams = ring_cameras(3, fx=400.0)
        p = np.array([0.1, 0.2, -0.1])
        rng = np.random.default_rng(7)
        errs = []
        for _ in range(50):
            group = []
            for vid in range(3):
                uv, _ = cams[vid].project(p[None, :])
                group.append((vid, uv[0, 0] + rng.normal(0, 0.5), uv[0, 1] + rng.normal(0, 0.5)))
            q = triangulate_keypoints([group], cams)[0]
            errs.append(np.linalg.norm(q - p))
        assert np.mean(errs) < 5 * 0.5 / 400.0 * 3.5

    def test_least_squares_reduces_ray_distance(self):
        cams = ring_cameras(4)
        p = np.array([0.0, 0.1, 0.2])
        rays = []
        rng = np.random.default_rng(8)
        for cam in cams:
            uv, _ = cam.project(p[None, :])
            rays.append(cam.pixel_to_ray(uv[0, 0] + rng.normal(0, 1.0), uv[0, 1] + rng.normal(0, 1.0)))
        x = triangulate_rays(rays)

        def cost(q):
            c = 0.0
            for r in rays:
                w = q - r.origin
                c += np.sum(w**2) - np.dot(w, r.direction) ** 2
            return c

        # x should beat random perturbations of itself (stationarity check)
        base = cost(x)
        for _ in range(50):
            assert base <= cost(x + rng.normal(0, 1e-3, size=3)) + 1e-15


class TestClosedFormAlignment:
    def test_identity_for_equal_sets(self):
        rng = np.random.default_rng(9)
        q = rng.normal(size=(5, 3))
        t = closed_form_alignment(q, q)
        np.testing.assert_allclose(t.matrix(), np.eye(4), atol=1e-12)

    def test_recovers_random_transform(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            t = random_transform(rng)
            q_a = rng.normal(size=(6, 3))
            q_b = t.inverse().apply(q_a)
            rec = closed_form_alignment(q_a, q_b)
            np.testing.assert_allclose(rec.matrix(), t.matrix(), atol=1e-9)

    def test_collinear_raises(self):
        q_b = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
        with pytest.raises(DegenerateConfiguration):
            closed_form_alignment(q_b, q_b)

    def test_invariant_to_joint_rigid_motion(self):
        rng = np.random.default_rng(11)
        t = random_transform(rng)
        g = random_transform(rng)
        q_a = rng.normal(size=(5, 3))
        q_b = t.inverse().apply(q_a)
        rec = closed_form_alignment(g.apply(q_a), g.apply(q_b))
        expected = compose(g, compose(t, g.inverse()))
        np.testing.assert_allclose(rec.matrix(), expected.matrix(), atol=1e-9)

    def test_minimizes_squared_error(self):
        # oracle: closed form beats jittered candidates on noisy correspondences
        rng = np.random.default_rng(12)
        t = random_transform(rng)
        q_a = rng.normal(size=(8, 3))
        q_b = t.inverse().apply(q_a) + rng.normal(0, 0.05, size=(8, 3))
        rec = closed_form_alignment(q_a, q_b)

        def sse(tr):
            return np.sum((q_a - tr.apply(q_b)) ** 2)

        base = sse(rec)
        for _ in range(100):
            jit = RigidTransform(
                rec.rotation @ rotation_from_axis_angle(rng.normal(0, 1e-3, 3)),
                rec.translation + rng.normal(0, 1e-3, 3),
            )
            assert base <= sse(jit) + 1e-12
