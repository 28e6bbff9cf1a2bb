"""Uniform B-spline trajectories in matrix form.

A curve of degree p with control points Q_0..Q_{N-1} and knot spacing dt is
evaluated span by span: on span j (times t0 + [j, j+1) * dt) the position is

    theta(u) = [1, u, ..., u^p] @ M @ [Q_j, ..., Q_{j+p}]^T,   u in [0, 1)

where M is a constant (p+1)x(p+1) matrix depending only on the degree.  The
entries of M are exact rationals; they are built once per degree and cached.

Derivative curves stay uniform B-splines: the velocity control points are
V_i = (Q_{i+1} - Q_i) / dt with the degree reduced by one, and the same rule
chains to acceleration and jerk.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb, factorial

import numpy as np

from .errors import DegreeUnderflow, OutOfSpan, Underdetermined

GROUND = "ground"
AERIAL = "aerial"


@functools.lru_cache(maxsize=None)
def _basis_matrix_cached(degree: int) -> np.ndarray:
    k = degree + 1
    m = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            acc = Fraction(0)
            for s in range(j, k):
                acc += (-1) ** (s - j) * comb(k, s - j) * Fraction(k - 1 - s) ** (k - 1 - i)
            m[i, j] = float(Fraction(comb(k - 1, i), factorial(k - 1)) * acc)
    m.setflags(write=False)
    return m


def basis_matrix(degree: int) -> np.ndarray:
    """Constant matrix of the power-basis form for a uniform B-spline.

    Row i holds the coefficients of u^i; column j selects control point j of
    the active window.  The first row sums to 1 and every other row sums to 0,
    which is the partition-of-unity property of the basis.
    """
    if degree < 0:
        raise ValueError("degree must be >= 0")
    return _basis_matrix_cached(int(degree))


# Matrices for the degrees used in practice, built eagerly so tests can verify
# them against the recursive construction without touching the cache.
BASIS_MATRICES = {p: basis_matrix(p) for p in range(1, 6)}


@dataclass
class BSplineTrajectory:
    """Uniform B-spline with per-control-point ground/aerial tags.

    mode_tags is a boolean array (True = aerial) or None when modes are not
    meaningful (e.g. derivative curves).
    """

    degree: int
    control_points: np.ndarray
    knot_spacing: float
    mode_tags: np.ndarray | None = None
    t0: float = 0.0

    def __post_init__(self):
        self.control_points = np.atleast_2d(np.asarray(self.control_points, dtype=float))
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.knot_spacing <= 0:
            raise ValueError("knot_spacing must be positive")
        if self.n_ctrl < self.degree + 1:
            raise ValueError(
                f"need at least degree+1={self.degree + 1} control points, got {self.n_ctrl}"
            )
        if self.mode_tags is not None:
            self.mode_tags = np.asarray(self.mode_tags, dtype=bool)
            if self.mode_tags.shape != (self.n_ctrl,):
                raise ValueError("mode_tags must have one entry per control point")

    @property
    def n_ctrl(self) -> int:
        return self.control_points.shape[0]

    @property
    def num_knots(self) -> int:
        # Knot count grows in lockstep with the control points: M = N + p.
        return self.n_ctrl + self.degree

    @property
    def span_count(self) -> int:
        return self.n_ctrl - self.degree

    @property
    def duration(self) -> float:
        return self.span_count * self.knot_spacing

    @property
    def t_end(self) -> float:
        return self.t0 + self.duration

    def _locate(self, t: float) -> tuple[int, float]:
        eps = 1e-9 * max(1.0, abs(self.t_end), abs(self.t0))
        if t < self.t0 - eps or t > self.t_end + eps:
            raise OutOfSpan(f"t={t} outside [{self.t0}, {self.t_end}]")
        s = (t - self.t0) / self.knot_spacing
        j = min(max(int(np.floor(s)), 0), self.span_count - 1)
        u = min(max(s - j, 0.0), 1.0)
        return j, u

    def basis_weights(self, t: float) -> tuple[int, np.ndarray]:
        """Span index and the p+1 convex weights of the active control points."""
        j, u = self._locate(t)
        powers = u ** np.arange(self.degree + 1)
        return j, powers @ basis_matrix(self.degree)

    def evaluate(self, t: float) -> np.ndarray:
        j, w = self.basis_weights(t)
        return w @ self.control_points[j : j + self.degree + 1]

    def evaluate_many(self, ts: np.ndarray) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        if ts.size == 0:
            return np.zeros((0, self.control_points.shape[1]))
        eps = 1e-9 * max(1.0, abs(self.t_end), abs(self.t0))
        if np.any(ts < self.t0 - eps) or np.any(ts > self.t_end + eps):
            raise OutOfSpan("sample times outside the valid span")
        s = (ts - self.t0) / self.knot_spacing
        j = np.clip(np.floor(s).astype(int), 0, self.span_count - 1)
        u = np.clip(s - j, 0.0, 1.0)
        powers = u[:, None] ** np.arange(self.degree + 1)[None, :]
        weights = powers @ basis_matrix(self.degree)
        windows = self.control_points[j[:, None] + np.arange(self.degree + 1)[None, :]]
        return np.einsum("nk,nkd->nd", weights, windows)

    def derivative(self) -> "BSplineTrajectory":
        """Velocity curve: one degree lower, same knot spacing and time origin."""
        if self.degree == 0:
            raise DegreeUnderflow("cannot differentiate a degree-0 curve")
        diff = np.diff(self.control_points, axis=0) / self.knot_spacing
        return BSplineTrajectory(self.degree - 1, diff, self.knot_spacing, None, self.t0)

    def greville_times(self) -> np.ndarray:
        """Reference time of each control point, clipped to the valid span."""
        times = self.t0 + (np.arange(self.n_ctrl) - (self.degree - 1) / 2.0) * self.knot_spacing
        return np.clip(times, self.t0, self.t_end)

    def with_control_points(self, points: np.ndarray) -> "BSplineTrajectory":
        tags = None if self.mode_tags is None else self.mode_tags.copy()
        return BSplineTrajectory(self.degree, np.array(points, dtype=float), self.knot_spacing, tags, self.t0)

    def copy(self) -> "BSplineTrajectory":
        return self.with_control_points(self.control_points.copy())


def derivative_chain(traj: BSplineTrajectory, order: int) -> BSplineTrajectory:
    """Apply derivative() `order` times (1=velocity, 2=acceleration, 3=jerk)."""
    out = traj
    for _ in range(order):
        out = out.derivative()
    return out


def sample_times(traj: BSplineTrajectory, max_spacing_s: float) -> np.ndarray:
    n = max(2, int(np.ceil(traj.duration / max_spacing_s)) + 1)
    return np.linspace(traj.t0, traj.t_end, n)


def export_samples(traj: BSplineTrajectory, path, sample_dt: float, ground_threshold: float) -> None:
    """Write 't x y z mode' rows sampled at a fixed rate."""
    ts = np.arange(traj.t0, traj.t_end + 1e-12, sample_dt)
    if ts.size == 0 or ts[-1] < traj.t_end - 1e-9:
        ts = np.append(ts, traj.t_end)
    pts = traj.evaluate_many(ts)
    with open(path, "w") as fh:
        fh.write("t x y z mode\n")
        for t, p in zip(ts, pts):
            mode = AERIAL if p[2] > ground_threshold else GROUND
            fh.write(f"{t!r} {p[0]!r} {p[1]!r} {p[2]!r} {mode}\n")


def dump_control_points(traj: BSplineTrajectory, path) -> None:
    with open(path, "w") as fh:
        fh.write("index x y z mode\n")
        for i, q in enumerate(traj.control_points):
            tag = ""
            if traj.mode_tags is not None:
                tag = AERIAL if traj.mode_tags[i] else GROUND
            fh.write(f"{i} {q[0]!r} {q[1]!r} {q[2]!r} {tag}\n")


def _weight_row(n_ctrl: int, degree: int, dt: float, t: float) -> np.ndarray:
    span_count = n_ctrl - degree
    s = t / dt
    j = min(max(int(np.floor(s)), 0), span_count - 1)
    u = min(max(s - j, 0.0), 1.0)
    w = (u ** np.arange(degree + 1)) @ basis_matrix(degree)
    row = np.zeros(n_ctrl)
    row[j : j + degree + 1] = w
    return row


def _velocity_row(n_ctrl: int, degree: int, dt: float, t: float) -> np.ndarray:
    # Row r with r @ Q = d(theta)/dt at time t, through the difference curve.
    wv = _weight_row(n_ctrl - 1, degree - 1, dt, t)
    row = np.zeros(n_ctrl)
    row[:-1] -= wv / dt
    row[1:] += wv / dt
    return row


def _fit_once(pts, n_ctrl, degree, dt, start_velocity, end_velocity):
    n_way = len(pts)
    duration = (n_ctrl - degree) * dt
    t_way = np.linspace(0.0, duration, n_way)
    a = np.vstack([_weight_row(n_ctrl, degree, dt, t) for t in t_way])

    cons = [_weight_row(n_ctrl, degree, dt, 0.0), _weight_row(n_ctrl, degree, dt, duration)]
    rhs = [pts[0], pts[-1]]
    if start_velocity is not None:
        cons.append(_velocity_row(n_ctrl, degree, dt, 0.0))
        rhs.append(np.asarray(start_velocity, dtype=float))
    if end_velocity is not None:
        cons.append(_velocity_row(n_ctrl, degree, dt, duration))
        rhs.append(np.asarray(end_velocity, dtype=float))
    c = np.vstack(cons)
    d = np.vstack(rhs)

    # Equality-constrained least squares via the KKT system, with a small pull
    # toward the straight chord so underdetermined fits stay well behaved.
    reg = 1e-8
    q0 = np.linspace(pts[0], pts[-1], n_ctrl)
    h = 2.0 * (a.T @ a) + reg * np.eye(n_ctrl)
    kkt = np.block([[h, c.T], [c, np.zeros((len(c), len(c)))]])
    rhs_full = np.vstack([2.0 * a.T @ pts + reg * q0, d])
    sol = np.linalg.solve(kkt, rhs_full)
    ctrl = sol[:n_ctrl]
    resid = float(np.max(np.linalg.norm(a @ ctrl - pts, axis=1)))
    return ctrl, resid, t_way


def fit_from_waypoints(
    points,
    knot_spacing: float,
    degree: int = 3,
    *,
    tolerance: float | None = None,
    start_velocity=None,
    end_velocity=None,
    max_refinements: int = 4,
) -> BSplineTrajectory:
    """Least-squares B-spline through an ordered waypoint sequence.

    Endpoints (and optional end velocities) are interpolated exactly via
    equality constraints; interior waypoints are matched in least squares at
    uniformly assigned parameters.  When `tolerance` is given, control points
    are added until the worst waypoint residual drops below it (bounded by
    `max_refinements` rounds).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] < 2:
        raise Underdetermined("need at least 2 waypoints")
    while pts.shape[0] < degree + 1:
        pts = np.vstack([pts, pts[-1]])

    n_ctrl = max(pts.shape[0] + degree - 1, degree + 1)
    best = None
    for _ in range(max_refinements + 1):
        ctrl, resid, _ = _fit_once(pts, n_ctrl, degree, knot_spacing, start_velocity, end_velocity)
        if best is None or resid < best[1]:
            best = (ctrl, resid)
        if tolerance is None or resid <= tolerance:
            break
        n_ctrl = int(np.ceil(n_ctrl * 1.5)) + 1
    return BSplineTrajectory(degree, best[0], knot_spacing)
