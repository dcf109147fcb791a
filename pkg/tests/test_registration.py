import math

import numpy as np
import pytest

from fieldreg.exceptions import EmptySampleSet, KeypointMismatch, NonFiniteLoss
from fieldreg.fixtures import blob_keypoints, registration_pair
from fieldreg.geometry import (
    PoseParams,
    RigidTransform,
    closed_form_alignment,
    compose,
    rotation_from_axis_angle,
)
from fieldreg.metrics import pose_error
from fieldreg.pipeline import plan_levels, prepare_scene
from fieldreg.registration import (
    KeypointSet,
    RegistrationConfig,
    RigidRegistration,
    RobustKernelParams,
    Schedule,
    _keypoint_terms,
    _matching_terms,
    gradient_check,
    keypoint_loss,
    matching_loss,
    register,
    residual,
    robust_kernel,
    sigma_level_values,
    total_loss,
)


def random_rigid(rng, angle=0.6, shift=0.3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return RigidTransform(
        rotation_from_axis_angle(axis * rng.uniform(0.1, angle)), rng.uniform(-shift, shift, 3)
    )


class ConstField:
    def __init__(self, value, sigma=0.1):
        self.value = value
        self.sigma = sigma

    def query(self, points):
        return np.full(len(np.atleast_2d(points)), self.value)

    def gradient(self, points):
        return np.zeros((len(np.atleast_2d(points)), 3))


class TransformedField:
    """field composed with a rigid transform: query(p) = base(T(p))."""

    def __init__(self, base, transform, sigma=None):
        self.base = base
        self.transform = transform
        self.sigma = base.sigma if sigma is None else sigma

    def query(self, points):
        return self.base.query(self.transform.apply(np.atleast_2d(points)))

    def gradient(self, points):
        g = self.base.gradient(self.transform.apply(np.atleast_2d(points)))
        return g @ self.transform.rotation


class TestRobustKernel:
    def test_zero_residual_is_zero(self):
        for c in (0.1, 0.3, 1.0):
            for alpha in (2.0, 1.0, 0.0, -2.0, -10.0):
                assert robust_kernel(0.0, RobustKernelParams(c, alpha)) == pytest.approx(0.0)

    def test_alpha_two_is_half_square(self):
        params = RobustKernelParams(c=0.3, alpha=2.0)
        assert robust_kernel(0.3, params) == pytest.approx(0.5)
        assert robust_kernel(0.6, params) == pytest.approx(2.0)

    def test_alpha_minus_two_at_c(self):
        # general form: (|a-2|/a) * [((r/c)^2/|a-2| + 1)^(a/2) - 1]
        # = (4/-2) * [(5/4)^(-1) - 1] = 0.4
        assert robust_kernel(0.3, RobustKernelParams(0.3, -2.0)) == pytest.approx(0.4)

    def test_continuity_across_special_alphas(self):
        res = np.array([0.17, 0.5, 1.3])
        c = 0.3
        for alpha in (2.0, 0.0):
            at = robust_kernel(res, RobustKernelParams(c, alpha))
            near = robust_kernel(res, RobustKernelParams(c, alpha - 1e-7))
            np.testing.assert_allclose(at, near, rtol=1e-5)

    def test_non_decreasing_in_residual(self):
        res = np.linspace(0, 3, 200)
        for alpha in (2.0, 0.5, 0.0, -4.0):
            k = robust_kernel(res, RobustKernelParams(0.3, alpha))
            assert np.all(np.diff(k) >= -1e-12)

    def test_partial_derivatives_match_fd(self):
        from fieldreg.registration import _kernel_grads, _kernel_value

        rng = np.random.default_rng(0)
        for alpha in (1.5, 0.5, -0.5, -2.0, -6.0):
            res = rng.uniform(0.01, 2.0, 16)
            c = 0.31
            _, d_res, d_c, d_alpha = _kernel_grads(res, c, alpha)
            eps = 1e-6
            fd_r = (_kernel_value(res + eps, c, alpha) - _kernel_value(res - eps, c, alpha)) / (2 * eps)
            fd_c = (_kernel_value(res, c + eps, alpha) - _kernel_value(res, c - eps, alpha)) / (2 * eps)
            fd_a = (_kernel_value(res, c, alpha + eps) - _kernel_value(res, c, alpha - eps)) / (2 * eps)
            np.testing.assert_allclose(d_res, fd_r, atol=1e-5)
            np.testing.assert_allclose(d_c, fd_c, atol=1e-5)
            np.testing.assert_allclose(d_alpha, fd_a, atol=1e-4)


class TestSchedule:
    def test_endpoints_exact(self):
        s = Schedule(10_000, 0.2, 0.1)
        assert s.lambda_at(0) == 1.0
        assert s.lambda_at(10_000) == 0.0
        assert s.lambda_at(5_000) == pytest.approx(0.5, abs=1e-15)

    def test_sigma_interpolates_monotonically(self):
        s = Schedule(1000, 0.2, 0.1)
        assert s.sigma_at(0) == pytest.approx(0.2)
        assert s.sigma_at(1000) == pytest.approx(0.1)
        vals = [s.sigma_at(t) for t in range(0, 1001, 50)]
        assert all(a >= b - 1e-15 for a, b in zip(vals, vals[1:]))

    def test_out_of_range_rejected(self):
        s = Schedule(100, 0.2, 0.1)
        with pytest.raises(ValueError):
            s.lambda_at(-1)
        with pytest.raises(ValueError):
            s.lambda_at(101)

    def test_sigma_levels_geometric(self):
        levels = sigma_level_values(0.2, 0.1, 5)
        assert levels[0] == pytest.approx(0.2)
        assert levels[-1] == pytest.approx(0.1)
        ratios = [a / b for a, b in zip(levels, levels[1:])]
        np.testing.assert_allclose(ratios, ratios[0])

    def test_sigma_levels_with_zero_end(self):
        levels = sigma_level_values(0.2, 0.0, 5)
        assert levels[-1] == 0.0
        assert all(a > b for a, b in zip(levels, levels[1:]))


class TestKeypointLoss:
    def test_zero_at_consistent_pair(self):
        rng = np.random.default_rng(1)
        t = random_rigid(rng)
        q_a = rng.normal(size=(5, 3))
        kp = KeypointSet(q_a, t.inverse().apply(q_a))
        assert keypoint_loss(kp, t) == pytest.approx(0.0, abs=1e-18)

    def test_unit_offsets(self):
        q_b = np.array([[0.0, 0, 0], [0, 1, 0], [0, 0, 1]])
        q_a = q_b + np.array([1.0, 0.0, 0.0])
        kp = KeypointSet(q_a, q_b)
        assert keypoint_loss(kp, RigidTransform.identity()) == pytest.approx(3.0)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        q_a = rng.normal(size=(6, 3))
        q_b = rng.normal(size=(6, 3))
        t = random_rigid(rng)
        perm = rng.permutation(6)
        l1 = keypoint_loss(KeypointSet(q_a, q_b), t)
        l2 = keypoint_loss(KeypointSet(q_a[perm], q_b[perm]), t)
        assert l1 == pytest.approx(l2)

    def test_mismatch_raises(self):
        with pytest.raises(KeypointMismatch):
            KeypointSet(np.zeros((3, 3)), np.zeros((4, 3)))
        with pytest.raises(KeypointMismatch):
            KeypointSet(np.zeros((2, 3)), np.zeros((2, 3)))


class TestResidual:
    def test_zero_for_consistent_fields(self, small_pair):
        da, db, kp, gt = small_pair
        fa = da.fields[0]
        fb = TransformedField(fa, gt)  # S_b = S_a composed with T(=gt): S_b(y)=S_a(gt y)
        # with a_to_b = gt^{-1}: S_b(gt^{-1} x) = S_a(x) -> residual 0
        pts = kp.q_a
        r = residual(pts, fa, fb, gt.inverse())
        np.testing.assert_allclose(r, 0.0, atol=1e-12)

    def test_far_outside_both_zero(self, small_pair):
        da, db, kp, gt = small_pair
        # beyond the 4-sigma smoothing tail of the finest level both fields die
        pts = np.array([[0.95, 0.0, 0.0], [0.0, -0.95, 0.1]])
        r = residual(pts, da.fields[-1], db.fields[-1], gt.inverse())
        np.testing.assert_allclose(r, 0.0, atol=1e-3)

    def test_misaligned_approx_sa(self, small_pair):
        da, db, kp, gt = small_pair
        # shift so far beyond sigma that the B term vanishes at sample points
        bad = compose(RigidTransform(np.eye(3), np.array([1.6, 0.0, 0.0])), gt.inverse())
        pts = kp.q_a
        sa = da.fields[0].query(pts)
        r = residual(pts, da.fields[0], db.fields[0], bad)
        np.testing.assert_allclose(r, sa, atol=1e-6)


class TestMatchingLoss:
    def test_zero_residuals_zero_loss(self):
        f = ConstField(0.7)
        pts = np.random.default_rng(0).normal(size=(10, 3))
        assert matching_loss(pts, f, f, RigidTransform.identity(), RobustKernelParams(0.3, 2.0)) == 0.0

    def test_single_sample_residual_c(self):
        fa = ConstField(0.8)
        fb = ConstField(0.5)
        loss = matching_loss(
            np.zeros((1, 3)), fa, fb, RigidTransform.identity(), RobustKernelParams(0.3, 2.0)
        )
        assert loss == pytest.approx(0.5)

    def test_mean_invariant_to_duplication(self):
        rng = np.random.default_rng(3)
        fa = ConstField(0.9)
        fb = ConstField(0.55)
        pts = rng.normal(size=(7, 3))
        k = RobustKernelParams(0.2, 1.0)
        l1 = matching_loss(pts, fa, fb, RigidTransform.identity(), k)
        l2 = matching_loss(np.concatenate([pts, pts]), fa, fb, RigidTransform.identity(), k)
        assert l1 == pytest.approx(l2)

    def test_empty_raises(self):
        with pytest.raises(EmptySampleSet):
            matching_loss(np.zeros((0, 3)), ConstField(1), ConstField(1), RigidTransform.identity(), RobustKernelParams(0.3, 2.0))


class TestTotalLoss:
    def test_endpoints(self):
        s = Schedule(100, 0.2, 0.1)
        assert total_loss(0, s, loss_match=123.0, loss_key=7.0) == pytest.approx(7.0)
        assert total_loss(100, s, loss_match=123.0, loss_key=7.0) == pytest.approx(123.0)
        assert total_loss(50, s, loss_match=4.0, loss_key=2.0) == pytest.approx(3.0, abs=1e-12)

    def test_unused_inputs_do_not_matter_at_endpoints(self):
        s = Schedule(10, 0.2, 0.1)
        assert total_loss(0, s, loss_match=1e9, loss_key=3.0) == total_loss(0, s, loss_match=-5.0, loss_key=3.0)
        assert total_loss(10, s, loss_match=3.0, loss_key=1e9) == total_loss(10, s, loss_match=3.0, loss_key=0.0)


class TestGradientChecks:
    def test_keypoint_gradient_exact(self):
        rng = np.random.default_rng(4)
        q_a = rng.normal(size=(6, 3))
        q_b = rng.normal(size=(6, 3))
        kp = KeypointSet(q_a, q_b)

        def loss_fn(params):
            loss, g_omega, g_t = _keypoint_terms(kp, params["omega"], params["t"])
            return loss, {"omega": g_omega, "t": g_t}

        for _ in range(5):
            params = {"omega": rng.normal(0, 0.5, 3), "t": rng.normal(0, 0.5, 3)}
            assert gradient_check(loss_fn, params) < 1e-5

    def test_matching_gradient_on_grid_fields(self, small_pair):
        da, db, kp, gt = small_pair
        rng = np.random.default_rng(5)
        pts = np.concatenate([kp.q_a, kp.q_a + rng.normal(0, 0.04, kp.q_a.shape)])
        fa, fb = da.fields[2], db.fields[2]

        def loss_fn(params):
            c = math.exp(float(np.atleast_1d(params["log_c"])[0]))
            alpha = float(np.atleast_1d(params["alpha"])[0])
            lm, g = _matching_terms(pts, fa, fb, params["omega"], params["t"], c, alpha)
            return lm, {
                "omega": g["omega"],
                "t": g["t"],
                "log_c": np.array([g["c"] * c]),
                "alpha": np.array([g["alpha"]]),
            }

        pose = PoseParams.from_transform(gt)
        params = {
            "omega": pose.axis_angle + rng.normal(0, 0.02, 3),
            "t": pose.translation + rng.normal(0, 0.01, 3),
            "log_c": np.array([math.log(0.25)]),
            "alpha": np.array([0.8]),
        }
        assert gradient_check(loss_fn, params) < 5e-2

    def test_stationary_at_keypoint_optimum(self):
        rng = np.random.default_rng(6)
        t = random_rigid(rng)
        q_a = rng.normal(size=(8, 3))
        kp = KeypointSet(q_a, t.inverse().apply(q_a))
        pose = PoseParams.from_transform(t)
        _, g_omega, g_t = _keypoint_terms(kp, pose.axis_angle, pose.translation)
        assert np.abs(g_omega).max() < 1e-4
        assert np.abs(g_t).max() < 1e-4


@pytest.mark.slow
class TestRegisterLoop:
    def test_warmup_matches_closed_form(self, small_pair):
        da, db, kp, gt = small_pair
        cfg = RegistrationConfig(total_steps=0, warmup_steps=4000, restarts=1, seed=0)
        res = register(da.fields, db.fields, kp, cfg, radius=1.0)
        oracle = closed_form_alignment(kp.q_a, kp.q_b)
        pose_got = PoseParams.from_transform(res.transform)
        pose_want = PoseParams.from_transform(oracle)
        np.testing.assert_allclose(pose_got.axis_angle, pose_want.axis_angle, atol=1e-3)
        np.testing.assert_allclose(pose_got.translation, pose_want.translation, atol=1e-3)

    def test_self_registration_improves_on_keypoints(self, small_pair):
        da, db, kp, gt = small_pair
        cfg = RegistrationConfig(
            total_steps=4000, warmup_steps=800, restarts=1, seed=0, max_samples=2000
        )
        res = register(da.fields, db.fields, kp, cfg, radius=1.0, seed=0)
        dt_kp, dr_kp = pose_error(res.warmup_transform, gt)
        dt, dr = pose_error(res.transform, gt)
        assert dt < dt_kp
        assert dr < dr_kp
        assert dt <= 0.01
        assert dr <= 2.0

    def test_trace_structure(self, small_pair):
        da, db, kp, gt = small_pair
        cfg = RegistrationConfig(total_steps=60, warmup_steps=10, restarts=1, seed=0)
        res = register(da.fields, db.fields, kp, cfg, radius=1.0)
        regs = [r for r in res.trace if r.phase == "registering"]
        assert len(regs) == 60
        assert regs[0].lam == 1.0
        d = regs[5].to_json_dict()
        assert set(d) == {
            "step", "lambda", "sigma", "loss_total", "loss_match", "loss_key",
            "pose", "n_samples", "c", "alpha",
        }
        assert len(d["pose"]) == 6
        # sample count never shrinks
        counts = [r.n_samples for r in regs]
        assert all(b >= a for a, b in zip(counts, counts[1:]))

    def test_deterministic_given_seed(self, small_pair):
        da, db, kp, gt = small_pair
        cfg = RegistrationConfig(total_steps=100, warmup_steps=20, restarts=1, seed=3)
        r1 = register(da.fields, db.fields, kp, cfg, radius=1.0, seed=3)
        r2 = register(da.fields, db.fields, kp, cfg, radius=1.0, seed=3)
        np.testing.assert_array_equal(r1.transform.matrix(), r2.transform.matrix())

    def test_non_finite_loss_raises(self, small_pair):
        da, db, kp, gt = small_pair

        class PoisonField(ConstField):
            def query(self, points):
                return np.full(len(np.atleast_2d(points)), np.nan)

            def gradient(self, points):
                return np.full((len(np.atleast_2d(points)), 3), np.nan)

        cfg = RegistrationConfig(total_steps=10, warmup_steps=0, restarts=1)
        with pytest.raises(NonFiniteLoss):
            register([PoisonField(0.5, 0.2)], [PoisonField(0.5, 0.2)], kp, cfg, radius=1.0)

    def test_matching_loss_emission_invariant(self):
        # fields extracted from density only: recoloring either scene leaves
        # the matching loss bit-identical for arbitrary poses
        from fieldreg.fixtures import blob_scene
        from fieldreg.pipeline import prepare_scene as prep

        plain = blob_scene(n_cameras=4, colored=False, width=64, height_px=48)
        lit = blob_scene(n_cameras=4, colored=True, width=64, height_px=48)
        f0 = prep(plain, [0.15], resolution=24).fields[0]
        f1 = prep(lit, [0.15], resolution=24).fields[0]
        rng = np.random.default_rng(7)
        pts = rng.uniform(-0.5, 0.5, size=(50, 3))
        k = RobustKernelParams(0.3, 2.0)
        for _ in range(3):
            t = random_rigid(rng)
            l0 = matching_loss(pts, f0, f0, t, k)
            l1 = matching_loss(pts, f1, f1, t, k)
            assert l0 == l1


class TestEstimator:
    def test_get_params_roundtrip(self):
        est = RigidRegistration(total_steps=123, seed=9)
        p = est.get_params()
        assert p["total_steps"] == 123
        est2 = RigidRegistration(**p)
        assert est2.seed == 9

    @pytest.mark.slow
    def test_fit_predict(self, small_pair):
        da, db, kp, gt = small_pair
        est = RigidRegistration(
            total_steps=1500, warmup_steps=500, restarts=2, seed=0, radius=1.0
        )
        est.fit(da.fields, db.fields, kp)
        assert hasattr(est, "transform_")
        assert len(est.restart_summaries_) == 2
        pts = np.array([[0.1, 0.2, 0.3]])
        np.testing.assert_allclose(est.predict(pts), est.transform_.apply(pts))
        dt, dr = pose_error(est.transform_, gt)
        assert dt < 0.02 and dr < 3.0
