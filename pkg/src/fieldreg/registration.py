"""Two-term robust registration of smoothed surface fields.

The optimization blends a keypoint alignment energy with a robust field
matching energy, annealed by a trigonometric scheduler, and runs first-order
(Adam) updates on an axis-angle pose plus the adaptive kernel parameters.

Transform convention: the *result* T maps scene-B coordinates into scene-A
coordinates (q_a ~ T(q_b)), matching the closed-form shape-matching oracle.
Field residuals evaluate scene-A sample points against scene B through the
inverse map, so ``residual`` takes the A->B transform explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np
from sklearn.base import BaseEstimator

from . import sampler as mh
from .exceptions import EmptySampleSet, KeypointMismatch, NonFiniteLoss
from .geometry import (
    PoseParams,
    RigidTransform,
    rotate_with_jacobian,
    rotation_from_axis_angle,
    so3_right_jacobian,
)
from .validation import check_points

_ALPHA_TOL = 1e-6
_ALPHA_FD_STEP = 1e-4


# ---------------------------------------------------------------------------
# robust kernel


@dataclass(frozen=True)
class RobustKernelParams:
    """Adaptive robust kernel state: inlier scale c and shape alpha."""

    c: float
    alpha: float

    def __post_init__(self):
        if not (np.isfinite(self.c) and self.c > 0):
            raise ValueError(f"kernel scale c must be positive, got {self.c}")
        if not np.isfinite(self.alpha):
            raise ValueError(f"kernel shape alpha must be finite, got {self.alpha}")


def _kernel_value(res: np.ndarray, c: float, alpha: float) -> np.ndarray:
    q2 = (res / c) ** 2
    if abs(alpha - 2.0) < _ALPHA_TOL:
        return 0.5 * q2
    if abs(alpha) < _ALPHA_TOL:
        return np.log1p(0.5 * q2)
    b = abs(alpha - 2.0)
    u = q2 / b + 1.0
    return (b / alpha) * (u ** (alpha / 2.0) - 1.0)


def robust_kernel(residual, params: RobustKernelParams):
    """General adaptive robust loss of a non-negative residual.

    alpha = 2 is scaled least squares, alpha = 0 the log (Cauchy) form, and
    decreasing alpha progressively mutes outliers; c splits inliers from
    outliers. Continuous across the special alphas.
    """
    res = np.asarray(residual, dtype=np.float64)
    out = _kernel_value(res, params.c, params.alpha)
    return float(out) if np.isscalar(residual) else out


def _kernel_grads(res: np.ndarray, c: float, alpha: float):
    """Value and partials (d/dres, d/dc, d/dalpha) of the robust kernel.

    The alpha partial uses the exact expression away from the special
    points and central differences inside the tiny windows around
    alpha = 0 and alpha = 2 where the closed form degenerates.
    """
    q2 = (res / c) ** 2
    if abs(alpha - 2.0) < _ALPHA_TOL:
        val = 0.5 * q2
        d_res = res / c**2
        d_c = -(res**2) / c**3
    elif abs(alpha) < _ALPHA_TOL:
        u0 = 0.5 * q2 + 1.0
        val = np.log(u0)
        d_res = res / c**2 / u0
        d_c = -(res**2) / c**3 / u0
    else:
        b = abs(alpha - 2.0)
        u = q2 / b + 1.0
        upow = u ** (alpha / 2.0)
        val = (b / alpha) * (upow - 1.0)
        d_res = res / c**2 * u ** (alpha / 2.0 - 1.0)
        d_c = -(res**2) / c**3 * u ** (alpha / 2.0 - 1.0)

    if abs(alpha - 2.0) < _ALPHA_TOL or abs(alpha) < _ALPHA_TOL:
        d_alpha = (
            _kernel_value(res, c, alpha + _ALPHA_FD_STEP) - _kernel_value(res, c, alpha - _ALPHA_FD_STEP)
        ) / (2.0 * _ALPHA_FD_STEP)
    else:
        b = abs(alpha - 2.0)
        s = math.copysign(1.0, alpha - 2.0)
        u = q2 / b + 1.0
        upow = u ** (alpha / 2.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            inner = 0.5 * np.log(u) - s * (alpha / 2.0) * q2 / (b * b * u)
        d_alpha = (2.0 * s / alpha**2) * (upow - 1.0) + (b / alpha) * upow * inner
        d_alpha = np.where(res == 0.0, 0.0, d_alpha)
    return val, d_res, d_c, d_alpha


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Schedule:
    """Trigonometric annealing of the keypoint weight and smoothing level."""

    total_steps: int
    sigma_start: float
    sigma_end: float

    def lambda_at(self, t: float) -> float:
        if not 0 <= t <= self.total_steps:
            raise ValueError(f"step {t} outside [0, {self.total_steps}]")
        if self.total_steps == 0:  # warmup-only runs: keypoints carry all weight
            return 1.0
        return 0.5 * (1.0 + math.cos(t * math.pi / self.total_steps))

    def sigma_at(self, t: float) -> float:
        lam = self.lambda_at(t)
        return self.sigma_end + (self.sigma_start - self.sigma_end) * lam


# ---------------------------------------------------------------------------
# keypoints


@dataclass(frozen=True)
class KeypointSet:
    """Index-aligned 3D correspondence pairs between the two scenes."""

    q_a: np.ndarray
    q_b: np.ndarray

    def __post_init__(self):
        q_a = check_points(self.q_a, "q_a")
        q_b = check_points(self.q_b, "q_b")
        if len(q_a) != len(q_b):
            raise KeypointMismatch(f"keypoint counts differ: {len(q_a)} vs {len(q_b)}")
        if len(q_a) < 3:
            raise KeypointMismatch(f"need >= 3 keypoint pairs, got {len(q_a)}")
        object.__setattr__(self, "q_a", q_a)
        object.__setattr__(self, "q_b", q_b)

    def __len__(self) -> int:
        return len(self.q_a)

    def max_distance(self) -> float:
        """Mean over the two sets of the max pairwise keypoint distance."""
        def d(pts):
            diff = pts[:, None, :] - pts[None, :, :]
            return float(np.sqrt((diff**2).sum(-1)).max())

        return 0.5 * (d(self.q_a) + d(self.q_b))


def keypoint_loss(keypoints: KeypointSet, transform: RigidTransform) -> float:
    """Sum of squared keypoint alignment errors sum ||q_a - T(q_b)||^2."""
    r = keypoints.q_a - transform.apply(keypoints.q_b)
    return float((r**2).sum())


# ---------------------------------------------------------------------------
# residuals and losses


def residual(x, field_a, field_b, a_to_b: RigidTransform):
    """Field mismatch |S_a(x) - S_b(a_to_b(x))| at scene-A point(s) x.

    ``a_to_b`` carries the sample into scene B's frame; for the registration
    output T (B->A) that is T.inverse(). Vector-valued fields (the radiance
    ablation) reduce with the Euclidean norm per point.
    """
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    va = np.asarray(field_a.query(pts))
    vb = np.asarray(field_b.query(a_to_b.apply(pts)))
    diff = va - vb
    res = np.abs(diff) if diff.ndim == 1 else np.linalg.norm(diff, axis=1)
    return float(res[0]) if single else res


def matching_loss(points, field_a, field_b, a_to_b: RigidTransform, kernel: RobustKernelParams) -> float:
    """Mean robust-kernel value of the field residuals over the sample set."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise EmptySampleSet("matching loss needs at least one sample")
    res = residual(pts, field_a, field_b, a_to_b)
    return float(np.mean(robust_kernel(res, kernel)))


def total_loss(t: float, schedule: Schedule, loss_match: float, loss_key: float) -> float:
    """Annealed combination (1 - lambda(t)) * match + lambda(t) * key."""
    lam = schedule.lambda_at(t)
    return (1.0 - lam) * loss_match + lam * loss_key


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RegistrationConfig:
    """Optimization settings; defaults follow the reference protocol."""

    total_steps: int = 10_000
    warmup_steps: int = 2_000
    lr_rotation: float = 0.02
    lr_translation: float = 0.01
    lr_kernel: float = 0.01
    sampler_interval: int = 20
    sigma_start: float | None = None  # default: d/5 from keypoint spread
    sigma_end: float | None = None  # default: d/10
    sigma_levels: int = 5
    c_init: float = 0.3
    alpha_init: float = 2.0
    alpha_min: float = -10.0
    alpha_max: float = 2.0
    rho: float | None = None  # default: radius/100
    max_samples: int = mh.DEFAULT_MAX_SAMPLES
    c_min: float = 0.05  # keep pose-informative residuals inside the inlier bowl
    restarts: int = 10
    seed: int = 0
    initial_transform: RigidTransform | None = None
    # ablation toggles (off by default)
    no_lambda_annealing: bool = False
    fixed_sigma: float | None = None
    uniform_sampling: bool = False
    uniform_sample_count: int = 2048
    density_residual: bool = False
    radiance_residual: bool = False
    density_scale: float = 10.0

    @classmethod
    def partial_object(cls, **overrides) -> "RegistrationConfig":
        """Preset for registering partial overlaps: finer smoothing schedule
        (down to the one-voxel level) and smaller pose steps."""
        base = dict(
            sigma_start=None,  # resolved to d/10
            sigma_end=0.0,
            lr_rotation=5e-4,
            lr_translation=5e-4,
            lr_kernel=0.01,
        )
        base.update(overrides)
        return cls(**base)

    def resolved_sigmas(self, keypoints: KeypointSet, partial: bool = False) -> tuple[float, float]:
        d = keypoints.max_distance()
        start = self.sigma_start if self.sigma_start is not None else (d / 10.0 if partial else d / 5.0)
        end = self.sigma_end if self.sigma_end is not None else d / 10.0
        return float(start), float(end)


def sigma_level_values(sigma_start: float, sigma_end: float, n_levels: int) -> list[float]:
    """Smoothing levels the schedule will snap to (largest first).

    Geometric spacing between the endpoints; when the schedule ends at
    exactly zero, the positive levels halve down from sigma_start and a
    final 0 level is appended.
    """
    if n_levels < 1:
        raise ValueError("need at least one sigma level")
    if sigma_start < sigma_end:
        raise ValueError("sigma_start must be >= sigma_end")
    if n_levels == 1 or sigma_start == sigma_end:
        return [float(sigma_start)]
    if sigma_end > 0:
        return [float(s) for s in np.geomspace(sigma_start, sigma_end, n_levels)]
    pos = [sigma_start * 0.5**k for k in range(n_levels - 1)]
    return [float(s) for s in pos] + [0.0]


def nearest_level(fields, sigma: float):
    return min(fields, key=lambda f: abs(f.sigma - sigma))


# ---------------------------------------------------------------------------
# ablation residual fields


class DensityResidualField:
    """Raw density, squashed to [0, 1] by a fixed scale (ablation only)."""

    def __init__(self, scene, scale: float = 10.0, gradient_step: float | None = None):
        self.scene = scene
        self.scale = float(scale)
        self.sigma = 0.0
        step = gradient_step if gradient_step is not None else scene.radius / 128.0
        self.gradient_step = np.full(3, float(step))

    def query(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return np.clip(self.scene.density_at(pts) / self.scale, 0.0, 1.0)

    def gradient(self, points) -> np.ndarray:
        pts = check_points(points, "points", allow_empty=True)
        out = np.empty_like(pts)
        for axis in range(3):
            h = self.gradient_step[axis]
            off = np.zeros(3)
            off[axis] = h
            out[:, axis] = (self.query(pts + off) - self.query(pts - off)) / (2 * h)
        return out


class RadianceResidualField:
    """View-independent emission color as the matched field (ablation only)."""

    def __init__(self, scene, gradient_step: float | None = None):
        if not scene.has_emission:
            raise ValueError("radiance residual needs a scene with emission")
        self.scene = scene
        self.sigma = 0.0
        step = gradient_step if gradient_step is not None else scene.radius / 128.0
        self.gradient_step = np.full(3, float(step))

    def query(self, points) -> np.ndarray:
        return self.scene.emission_at(np.asarray(points, dtype=np.float64))

    def gradient(self, points) -> np.ndarray:
        """Per-channel spatial Jacobian, (N, 3 channels, 3 dims)."""
        pts = check_points(points, "points", allow_empty=True)
        out = np.empty((len(pts), 3, 3))
        for axis in range(3):
            h = self.gradient_step[axis]
            off = np.zeros(3)
            off[axis] = h
            out[:, :, axis] = (self.query(pts + off) - self.query(pts - off)) / (2 * h)
        return out


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction and per-parameter-group learning rates."""

    def __init__(self, lrs: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for key, value in params.items():
            g = grads[key]
            m = self.m.get(key, np.zeros_like(value))
            v = self.v.get(key, np.zeros_like(value))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[key] = m
            self.v[key] = v
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            out[key] = value - self.lrs[key] * m_hat / (np.sqrt(v_hat) + self.eps)
        return out

    def reset(self, key: str) -> None:
        self.m.pop(key, None)
        self.v.pop(key, None)


# ---------------------------------------------------------------------------
# loss + gradient evaluation over the two terms


def _channels(arr: np.ndarray) -> np.ndarray:
    return arr[:, None] if arr.ndim == 1 else arr


def _field_gradient_channels(field, points: np.ndarray) -> np.ndarray:
    g = field.gradient(points)
    return g[:, None, :] if g.ndim == 2 else g


def _keypoint_terms(keypoints: KeypointSet, omega, translation, want_grads=True):
    rotated, jac = rotate_with_jacobian(omega, keypoints.q_b)
    r = keypoints.q_a - rotated - translation
    loss = float((r**2).sum())
    if not want_grads:
        return loss, None, None
    g_t = -2.0 * r.sum(axis=0)
    g_omega = -2.0 * np.einsum("nd,ndk->k", r, jac)
    return loss, g_omega, g_t


def _matching_terms(points, field_a, field_b, omega, translation, c, alpha, sa_vals=None, want_grads=True):
    """Mean robust residual loss over scene-A samples, with gradients.

    The sample is carried to B via y = R(-omega) (x - t), the inverse of
    the output transform; dres/d(pose) chains the field-B spatial gradient
    through that map. The omega gradient contracts through cross products
    instead of materializing per-point rotation Jacobians.
    """
    n = len(points)
    if n == 0:
        raise EmptySampleSet("matching loss needs at least one sample")
    if sa_vals is None:
        sa_vals = field_a.query(points)
    neg = -np.asarray(omega, dtype=np.float64)
    r_neg = rotation_from_axis_angle(neg)
    v = points - translation
    y = v @ r_neg.T
    if want_grads and hasattr(field_b, "query_with_gradient"):
        vb, grads_b = field_b.query_with_gradient(y)
        vb = _channels(np.asarray(vb))
        grads_b = grads_b[:, None, :]
    else:
        vb = _channels(np.asarray(field_b.query(y)))
        grads_b = _field_gradient_channels(field_b, y) if want_grads else None
    diff = _channels(np.asarray(sa_vals)) - vb
    res = np.linalg.norm(diff, axis=1)
    val, d_res, d_c, d_alpha = _kernel_grads(res, c, alpha)
    loss = float(val.mean())
    if not want_grads:
        return loss, None
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(res[:, None] > 0, diff / res[:, None], 0.0)
    eff_grad = np.einsum("nc,ncd->nd", unit, grads_b)  # d(res)/dy = -eff_grad
    w = d_res / n
    # dres/domega = -(u x v)^T Jr(-omega) with u = R(-omega)^T eff_grad
    u = eff_grad @ r_neg
    g_omega = -so3_right_jacobian(neg).T @ np.cross(u, v).T @ w
    g_t = r_neg.T @ (w @ eff_grad)
    g_c = float(d_c.mean())
    g_alpha = float(d_alpha.mean())
    return loss, {"omega": g_omega, "t": g_t, "c": g_c, "alpha": g_alpha}


def gradient_check(loss_fn, params: dict, step: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params) -> (loss, grads)``; the finite-difference step is
    scaled per component by the parameter magnitude. Errors are normalized
    by the largest finite-difference gradient entry.
    """
    _, grads = loss_fn(params)
    max_abs = 0.0
    max_err = 0.0
    fd_all = {}
    for key, value in params.items():
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        fd = np.zeros_like(value)
        for i in range(value.size):
            h = step * max(1.0, abs(value.flat[i]))
            plus = dict(params)
            minus = dict(params)
            vp = value.copy()
            vm = value.copy()
            vp.flat[i] += h
            vm.flat[i] -= h
            plus[key] = vp if np.asarray(params[key]).ndim else float(vp[0])
            minus[key] = vm if np.asarray(params[key]).ndim else float(vm[0])
            fd.flat[i] = (loss_fn(plus)[0] - loss_fn(minus)[0]) / (2 * h)
        fd_all[key] = fd
        max_abs = max(max_abs, float(np.abs(fd).max(initial=0.0)))
    denom = max(max_abs, 1e-12)
    for key, fd in fd_all.items():
        a = np.atleast_1d(np.asarray(grads[key], dtype=np.float64))
        max_err = max(max_err, float(np.abs(a - fd).max() / denom))
    return max_err


# ---------------------------------------------------------------------------
# trace and results


@dataclass(frozen=True)
class TraceRecord:
    step: int
    lam: float
    sigma: float
    loss_total: float
    loss_match: float
    loss_key: float
    pose: np.ndarray  # axis-angle + translation of the B->A output transform
    n_samples: int
    c: float
    alpha: float
    phase: str = "registering"

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "lambda": self.lam,
            "sigma": self.sigma,
            "loss_total": self.loss_total,
            "loss_match": self.loss_match,
            "loss_key": self.loss_key,
            "pose": [float(x) for x in self.pose],
            "n_samples": self.n_samples,
            "c": self.c,
            "alpha": self.alpha,
        }


@dataclass
class RegistrationResult:
    transform: RigidTransform
    kernel: RobustKernelParams
    trace: list
    active: mh.ActiveSampleSet | None
    warmup_transform: RigidTransform
    schedule: Schedule
    seed: int

    @property
    def final_total_loss(self) -> float:
        return self.trace[-1].loss_total if self.trace else math.inf


def _pose_vector(pose: PoseParams) -> np.ndarray:
    return np.concatenate([pose.axis_angle, pose.translation])


def _uniform_ball(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    u = rng.standard_normal((n, 3))
    u /= np.linalg.norm(u, axis=1)[:, None]
    return u * (radius * rng.uniform(size=n) ** (1.0 / 3.0))[:, None]


def register(
    fields_a,
    fields_b,
    keypoints: KeypointSet,
    config: RegistrationConfig,
    radius: float,
    seed: int | None = None,
    trace_hook=None,
) -> RegistrationResult:
    """Run warmup plus one annealed registration; deterministic given seed.

    ``fields_a``/``fields_b`` are the smoothed fields at the sigma levels
    the schedule will visit (nearest-level lookup). Raises NonFiniteLoss if
    any loss or gradient goes non-finite.
    """
    seed = config.seed if seed is None else int(seed)
    sigma_start, sigma_end = config.resolved_sigmas(keypoints)
    schedule = Schedule(config.total_steps, sigma_start, sigma_end)
    rho = config.rho if config.rho is not None else radius / 100.0

    init = config.initial_transform or RigidTransform.identity()
    pose = PoseParams.from_transform(init)
    params = {
        "omega": pose.axis_angle.copy(),
        "t": pose.translation.copy(),
        "log_c": np.array([math.log(config.c_init)]),
        "alpha": np.array([config.alpha_init]),
    }
    adam = Adam(
        lrs={
            "omega": config.lr_rotation,
            "t": config.lr_translation,
            "log_c": config.lr_kernel,
        }
    )

    def check_finite(step, **values):
        for name, val in values.items():
            if not np.all(np.isfinite(val)):
                raise NonFiniteLoss(f"non-finite {name} at step {step}")

    def canonicalize():
        omega = params["omega"]
        if np.linalg.norm(omega) > math.pi:
            params["omega"] = PoseParams(omega, params["t"]).canonicalized().axis_angle
            adam.reset("omega")  # wrapped axis flips invalidate the moments

    trace: list[TraceRecord] = []

    def emit(step, lam, sigma, lm, lk, lt, n_samples, phase, active=None):
        record = TraceRecord(
            step=step,
            lam=lam,
            sigma=sigma,
            loss_total=lt,
            loss_match=lm,
            loss_key=lk,
            pose=_pose_vector(PoseParams(params["omega"], params["t"])),
            n_samples=n_samples,
            c=float(math.exp(params["log_c"][0])),
            alpha=float(params["alpha"][0]),
            phase=phase,
        )
        trace.append(record)
        if trace_hook is not None:
            trace_hook(record, active)

    # --- keypoint-only warmup ---------------------------------------------
    for step in range(config.warmup_steps):
        loss, g_omega, g_t = _keypoint_terms(keypoints, params["omega"], params["t"])
        check_finite(step, loss=loss, g_omega=g_omega, g_t=g_t)
        sub = {k: params[k] for k in ("omega", "t", "log_c")}
        params.update(adam.step(sub, {"omega": g_omega, "t": g_t, "log_c": np.zeros(1)}))
        canonicalize()
        if step % 50 == 0 or step == config.warmup_steps - 1:
            emit(step, 1.0, schedule.sigma_at(0), 0.0, loss, loss, 0, "warmup")

    warmup_transform = PoseParams(params["omega"], params["t"]).to_transform()

    # --- annealed two-term optimization ------------------------------------
    active = mh.bootstrap(keypoints.q_a, rho=rho, seed=seed)
    rng_uniform = np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
    uniform_points = None
    sa_cache: dict = {}

    for step in range(config.total_steps):
        lam = 0.0 if config.no_lambda_annealing else schedule.lambda_at(step)
        sigma = config.fixed_sigma if config.fixed_sigma is not None else schedule.sigma_at(step)
        field_a = nearest_level(fields_a, sigma)
        field_b = nearest_level(fields_b, sigma)
        c = float(math.exp(params["log_c"][0]))
        alpha = float(params["alpha"][0])
        a_to_b = PoseParams(params["omega"], params["t"]).to_transform().inverse()

        if config.uniform_sampling:
            if uniform_points is None or step % config.sampler_interval == 0:
                uniform_points = _uniform_ball(rng_uniform, config.uniform_sample_count, radius)
            points = uniform_points
            sa_vals = field_a.query(points)
        else:
            if step > 0 and step % config.sampler_interval == 0:
                active = mh.update(
                    active,
                    field_a,
                    field_b,
                    a_to_b,
                    kernel_c=c,
                    radius=radius,
                    step=step,
                    max_samples=config.max_samples,
                )
                sa_cache.clear()
            points = active.points
            key = (id(field_a), len(points))
            if key not in sa_cache:
                sa_cache.clear()
                sa_cache[key] = field_a.query(points)
            sa_vals = sa_cache[key]

        loss_match, g_match = _matching_terms(
            points, field_a, field_b, params["omega"], params["t"], c, alpha, sa_vals=sa_vals
        )
        loss_key, gk_omega, gk_t = _keypoint_terms(keypoints, params["omega"], params["t"])
        loss_tot = (1.0 - lam) * loss_match + lam * loss_key

        g_omega = (1.0 - lam) * g_match["omega"] + lam * gk_omega
        g_t = (1.0 - lam) * g_match["t"] + lam * gk_t
        # c follows the scale-calibrated (NLL) objective: d/dc [mean kappa + log c].
        # The raw kernel is monotone-decreasing in c, so bare gradient descent
        # would inflate c without bound and break the sampler's xi_r = c.
        g_log_c = np.array([(1.0 - lam) * (g_match["c"] * c + 1.0)])
        g_alpha = (1.0 - lam) * g_match["alpha"]
        check_finite(step, loss=loss_tot, g_omega=g_omega, g_t=g_t, g_log_c=g_log_c, g_alpha=g_alpha)

        sub = {k: params[k] for k in ("omega", "t", "log_c")}
        params.update(adam.step(sub, {"omega": g_omega, "t": g_t, "log_c": g_log_c}))
        params["log_c"] = np.maximum(params["log_c"], math.log(config.c_min))
        # alpha takes plain gradient steps: the raw kernel is monotone in
        # alpha, and Adam's sign normalization would drift it to the clamp
        # at full rate regardless of actual outlier pressure
        params["alpha"] = np.clip(
            params["alpha"] - config.lr_kernel * g_alpha, config.alpha_min, config.alpha_max
        )
        canonicalize()
        emit(
            step,
            lam,
            sigma,
            loss_match,
            loss_key,
            loss_tot,
            len(points),
            "registering",
            active if not config.uniform_sampling else None,
        )

    return RegistrationResult(
        transform=PoseParams(params["omega"], params["t"]).to_transform(),
        kernel=RobustKernelParams(c=float(math.exp(params["log_c"][0])), alpha=float(params["alpha"][0])),
        trace=trace,
        active=None if config.uniform_sampling else active,
        warmup_transform=warmup_transform,
        schedule=schedule,
        seed=seed,
    )


def register_restarts(
    fields_a,
    fields_b,
    keypoints: KeypointSet,
    config: RegistrationConfig,
    radius: float,
    trace_hook=None,
):
    """Best-of-N protocol: seeded restarts, winner by final total loss.

    Returns (best result, per-restart summaries). Raises NonFiniteLoss only
    if every restart failed.
    """
    best = None
    summaries = []
    failures = []
    for i in range(max(1, config.restarts)):
        seed = config.seed + i
        try:
            result = register(
                fields_a, fields_b, keypoints, config, radius, seed=seed, trace_hook=trace_hook
            )
        except NonFiniteLoss as exc:
            failures.append(str(exc))
            summaries.append({"restart": i, "seed": seed, "failed": True, "error": str(exc)})
            continue
        summaries.append(
            {
                "restart": i,
                "seed": seed,
                "failed": False,
                "final_total_loss": result.final_total_loss,
                "final_match_loss": result.trace[-1].loss_match,
                "final_key_loss": result.trace[-1].loss_key,
                "pose": [float(x) for x in _pose_vector(PoseParams.from_transform(result.transform))],
                "n_samples": len(result.active) if result.active is not None else config.uniform_sample_count,
            }
        )
        if best is None or result.final_total_loss < best.final_total_loss:
            best = result
    if best is None:
        raise NonFiniteLoss("all restarts failed: " + "; ".join(failures))
    return best, summaries


# ---------------------------------------------------------------------------
# estimator facade


class RigidRegistration(BaseEstimator):
    """sklearn-style estimator: fit() recovers the B->A rigid transform.

    ``fit(fields_a, fields_b, keypoints)`` runs the full protocol;
    ``predict(X)`` then maps scene-B points into scene-A coordinates.
    """

    def __init__(
        self,
        total_steps: int = 10_000,
        warmup_steps: int = 2_000,
        lr_rotation: float = 0.02,
        lr_translation: float = 0.01,
        lr_kernel: float = 0.01,
        sampler_interval: int = 20,
        sigma_start: float | None = None,
        sigma_end: float | None = None,
        sigma_levels: int = 5,
        c_init: float = 0.3,
        alpha_init: float = 2.0,
        restarts: int = 10,
        seed: int = 0,
        radius: float = 1.0,
        uniform_sampling: bool = False,
        no_lambda_annealing: bool = False,
        fixed_sigma: float | None = None,
    ):
        self.total_steps = total_steps
        self.warmup_steps = warmup_steps
        self.lr_rotation = lr_rotation
        self.lr_translation = lr_translation
        self.lr_kernel = lr_kernel
        self.sampler_interval = sampler_interval
        self.sigma_start = sigma_start
        self.sigma_end = sigma_end
        self.sigma_levels = sigma_levels
        self.c_init = c_init
        self.alpha_init = alpha_init
        self.restarts = restarts
        self.seed = seed
        self.radius = radius
        self.uniform_sampling = uniform_sampling
        self.no_lambda_annealing = no_lambda_annealing
        self.fixed_sigma = fixed_sigma

    def _config(self) -> RegistrationConfig:
        return RegistrationConfig(
            total_steps=self.total_steps,
            warmup_steps=self.warmup_steps,
            lr_rotation=self.lr_rotation,
            lr_translation=self.lr_translation,
            lr_kernel=self.lr_kernel,
            sampler_interval=self.sampler_interval,
            sigma_start=self.sigma_start,
            sigma_end=self.sigma_end,
            sigma_levels=self.sigma_levels,
            c_init=self.c_init,
            alpha_init=self.alpha_init,
            restarts=self.restarts,
            seed=self.seed,
            uniform_sampling=self.uniform_sampling,
            no_lambda_annealing=self.no_lambda_annealing,
            fixed_sigma=self.fixed_sigma,
        )

    def fit(self, fields_a, fields_b, keypoints):
        if not isinstance(keypoints, KeypointSet):
            keypoints = KeypointSet(*keypoints)
        result, summaries = register_restarts(
            fields_a, fields_b, keypoints, self._config(), radius=self.radius
        )
        self.result_ = result
        self.restart_summaries_ = summaries
        self.transform_ = result.transform
        self.rotation_ = result.transform.rotation
        self.translation_ = result.transform.translation
        self.trace_ = result.trace
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "transform_"):
            raise RuntimeError("RigidRegistration is not fitted")
        return self.transform_.apply(check_points(X, "X"))
