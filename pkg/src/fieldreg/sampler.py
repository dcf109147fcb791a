"""Metropolis-Hastings-style maintenance of the matching sample set.

The active set starts at the annotated keypoints and only ever grows: each
update proposes one cube-uniform offset per existing point and accepts a
candidate when (1) its surface value clears an adaptive threshold, (2) its
field residual under the current pose is within the robust kernel's inlier
scale, and (3) it keeps a minimum distance to the pre-update set. Every
accepted point keeps its acceptance-time parameters so the decision can be
re-audited afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import EmptyKeypoints
from .geometry import RigidTransform
from .validation import check_points

XI_S_DIVISOR = math.e**2

DEFAULT_MAX_SAMPLES = 20_000


@dataclass(frozen=True)
class AcceptanceRecord:
    """Parameters in force when a point was accepted."""

    step: int
    xi_s: float
    xi_r: float
    sigma: float
    a_to_b: np.ndarray  # 4x4 matrix of the A->B map used for the residual
    prev_count: int  # size of the pre-update set the predicates ran against


@dataclass(frozen=True)
class ActiveSampleSet:
    """Append-only sample set; ``records[i]`` is None for bootstrap points."""

    points: np.ndarray
    rho: float
    seed: int
    update_count: int = 0
    records: tuple = ()
    xi_s: float = 0.0
    xi_r: float = 0.0
    capped: bool = False

    def __len__(self) -> int:
        return len(self.points)


def bootstrap(q_a, rho: float, seed: int = 0) -> ActiveSampleSet:
    """Initial active set: exactly the scene-A keypoint locations."""
    pts = np.asarray(q_a, dtype=np.float64)
    if pts.size == 0:
        raise EmptyKeypoints("cannot bootstrap the sampler from zero keypoints")
    pts = check_points(pts, "q_a")
    return ActiveSampleSet(
        points=pts, rho=float(rho), seed=int(seed), records=(None,) * len(pts)
    )


def compute_xi_s(active: ActiveSampleSet, field_a) -> float:
    """Adaptive surface threshold: best surface value in the set over e^2."""
    if len(active) == 0:
        raise EmptyKeypoints("active set is empty")
    return float(np.max(field_a.query(active.points))) / XI_S_DIVISOR


def update(
    active: ActiveSampleSet,
    field_a,
    field_b,
    a_to_b: RigidTransform,
    kernel_c: float,
    radius: float,
    step: int = 0,
    max_samples: int = DEFAULT_MAX_SAMPLES,
) -> ActiveSampleSet:
    """One sampling round: propose one candidate per point, keep survivors.

    Candidates are the current points plus rho * U[-1, 1]^3 offsets. The
    min-distance predicate is evaluated against the pre-update set only, so
    acceptances within one round are order-independent.
    """
    prev = active.points
    n_prev = len(prev)
    rng = np.random.default_rng(np.random.SeedSequence([active.seed, active.update_count]))
    candidates = prev + active.rho * rng.uniform(-1.0, 1.0, size=(n_prev, 3))

    xi_s = compute_xi_s(active, field_a)
    xi_r = float(kernel_c)

    surface_ok = field_a.query(candidates) >= xi_s
    res = np.abs(field_a.query(candidates) - field_b.query(a_to_b.apply(candidates)))
    residual_ok = res <= xi_r
    dist_ok = cKDTree(prev).query(candidates)[0] >= active.rho / 10.0
    inside = np.einsum("ij,ij->i", candidates, candidates) <= radius * radius

    accepted = surface_ok & residual_ok & dist_ok & inside
    capped = active.capped
    budget = max_samples - n_prev
    idx = np.flatnonzero(accepted)
    if len(idx) > budget:
        idx = idx[:budget]
        capped = True

    if len(idx) == 0:
        return ActiveSampleSet(
            points=prev,
            rho=active.rho,
            seed=active.seed,
            update_count=active.update_count + 1,
            records=active.records,
            xi_s=xi_s,
            xi_r=xi_r,
            capped=capped,
        )

    record = AcceptanceRecord(
        step=int(step),
        xi_s=xi_s,
        xi_r=xi_r,
        sigma=float(getattr(field_a, "sigma", 0.0)),
        a_to_b=a_to_b.matrix(),
        prev_count=n_prev,
    )
    return ActiveSampleSet(
        points=np.concatenate([prev, candidates[idx]], axis=0),
        rho=active.rho,
        seed=active.seed,
        update_count=active.update_count + 1,
        records=active.records + (record,) * len(idx),
        xi_s=xi_s,
        xi_r=xi_r,
        capped=capped,
    )


def audit(active: ActiveSampleSet, fields_a, fields_b) -> np.ndarray:
    """Re-check all three acceptance predicates under acceptance-time state.

    ``fields_a``/``fields_b`` map each record's sigma back to the smoothed
    fields (nearest level). Bootstrap points vacuously pass. Returns a
    boolean array, one entry per point.
    """

    def nearest(fields, sigma):
        return min(fields, key=lambda f: abs(f.sigma - sigma))

    ok = np.ones(len(active), dtype=bool)
    for i, rec in enumerate(active.records):
        if rec is None:
            continue
        x = active.points[i : i + 1]
        fa = nearest(fields_a, rec.sigma)
        fb = nearest(fields_b, rec.sigma)
        t = RigidTransform.from_matrix(rec.a_to_b)
        s_val = float(fa.query(x)[0])
        res = abs(s_val - float(fb.query(t.apply(x))[0]))
        d = float(np.min(np.linalg.norm(active.points[: rec.prev_count] - x, axis=1)))
        ok[i] = (s_val >= rec.xi_s) and (res <= rec.xi_r) and (d >= active.rho / 10.0)
    return ok
