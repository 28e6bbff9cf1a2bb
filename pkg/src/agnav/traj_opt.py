"""Gradient-based B-spline refinement without any distance field.

Collision handling works through anchor pairs: for a control point stuck
inside an obstacle, a unit direction v points from the naive initial curve
toward the collision-free guidance path, and p marks where that direction
crosses the obstacle surface.  The scalar obstacle distance of control point
Q against a pair is (Q - p) . v — positive once the point has escaped along
v — and the collision cost pushes every pair's distance past the safe
clearance.  Smoothness, per-axis dynamic-feasibility and ground-curvature
terms complete the objective; all gradients are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .bspline import BSplineTrajectory, derivative_chain
from .errors import DegenerateSpacing, MarchEscapedGrid
from .lbfgs import minimize_lbfgs
from .voxel_map import VoxelGrid


@dataclass
class AnchorPair:
    point_index: int
    obstacle_index: int
    surface_point: np.ndarray
    direction: np.ndarray  # unit vector, safe side is +

    def __post_init__(self):
        self.surface_point = np.asarray(self.surface_point, dtype=float)
        self.direction = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(self.direction)
        if not np.isclose(n, 1.0, atol=1e-6):
            raise ValueError("anchor direction must be a unit vector")


@dataclass
class CostWeights:
    lambda_smooth: float = 1.0
    lambda_collision: float = 1000.0
    lambda_feasibility: float = 1.0
    lambda_curvature: float = 1.0
    safe_clearance: float = 0.3
    curvature_max: float = 2.0
    v_max: float = 2.0
    a_max: float = 3.0
    j_max: float = 10.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        lams = (self.lambda_smooth, self.lambda_collision, self.lambda_feasibility, self.lambda_curvature)
        if any(l < 0 for l in lams):
            raise ValueError("cost weights must be nonnegative")
        if self.safe_clearance <= 0:
            raise ValueError("safe_clearance must be positive")
        if min(self.v_max, self.a_max, self.j_max, self.curvature_max) <= 0:
            raise ValueError("limits must be positive")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "CostWeights":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class OptimizationReport:
    iterations: int
    cost: float
    breakdown: dict
    grad_norm: float
    scaling_applied: float
    feasible: bool
    status: str


# ---------------------------------------------------------------------------
# Initial trajectory and anchor pairs


def build_initial_trajectory(
    start,
    goal,
    seed: int,
    *,
    spacing: float = 0.5,
    jitter: float = 0.5,
    knot_spacing: float = 0.5,
    degree: int = 3,
    start_velocity=None,
) -> BSplineTrajectory:
    """Naive seed curve: points along the chord with seeded lateral jitter.

    Interior points wobble sideways (horizontal normal of the chord) by at
    most `jitter`; endpoints are exact.  Boundary control points are ramped so
    the curve starts at `start` with `start_velocity` (default rest) and ends
    at `goal` at rest.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    rng = np.random.default_rng(seed)
    dist = np.linalg.norm(goal - start)
    n_seg = max(1, int(round(dist / spacing)))
    base = np.linspace(start, goal, n_seg + 1)

    chord = goal - start
    lateral = np.array([-chord[1], chord[0], 0.0])
    ln = np.linalg.norm(lateral)
    lateral = lateral / ln if ln > 1e-12 else np.array([1.0, 0.0, 0.0])
    if len(base) > 2 and jitter > 0:
        offsets = rng.uniform(-jitter, jitter, size=len(base) - 2)
        base[1:-1] += offsets[:, None] * lateral

    v0 = np.zeros(3) if start_velocity is None else np.asarray(start_velocity, dtype=float)
    ramp = np.arange(degree) - (degree - 1) / 2.0
    head = start + v0 * knot_spacing * ramp[:, None]
    tail = np.tile(goal, (degree - 1, 1))
    ctrl = np.vstack([head, base[1:], tail]) if len(base) > 1 else np.vstack([head, tail])
    return BSplineTrajectory(degree, ctrl, knot_spacing)


def assign_mode_tags(traj: BSplineTrajectory, ground_threshold: float) -> BSplineTrajectory:
    tags = traj.control_points[:, 2] > ground_threshold
    return BSplineTrajectory(traj.degree, traj.control_points.copy(), traj.knot_spacing, tags, traj.t0)


def _polyline_arclengths(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    return s / s[-1] if s[-1] > 1e-12 else np.linspace(0.0, 1.0, len(points))


def _point_at_fraction(points: np.ndarray, s_norm: np.ndarray, frac: float) -> np.ndarray:
    frac = min(max(frac, 0.0), 1.0)
    k = int(np.searchsorted(s_norm, frac, side="right")) - 1
    k = min(max(k, 0), len(points) - 2)
    span = s_norm[k + 1] - s_norm[k]
    w = 0.0 if span <= 1e-15 else (frac - s_norm[k]) / span
    return points[k] * (1 - w) + points[k + 1] * w


def generate_anchor_pairs(
    initial: BSplineTrajectory,
    guidance: np.ndarray,
    segment: tuple[int, int],
    grid: VoxelGrid,
    *,
    layer: str = "completed",
) -> list[AnchorPair]:
    """Anchor pairs for every in-collision control point of a segment.

    The direction is the unit vector from the stuck point toward the guidance
    polyline point at the same normalized arc length; the surface point is
    each occupied-to-free boundary crossed while marching that way (one pair
    per obstacle pierced).  Marching off the grid raises MarchEscapedGrid.
    """
    i0, i1 = segment
    ctrl = initial.control_points
    if not (0 <= i0 <= i1 < len(ctrl)):
        raise ValueError("segment indices out of range")
    guidance = np.atleast_2d(np.asarray(guidance, dtype=float))
    if len(guidance) < 2:
        guidance = np.vstack([guidance, guidance])

    seg_pts = ctrl[i0 : i1 + 1]
    s_ctrl = _polyline_arclengths(seg_pts)
    s_guid = _polyline_arclengths(guidance)
    occ = grid.occupied_points(seg_pts, layer)
    step = grid.resolution / 2.0

    pairs: list[AnchorPair] = []
    for k in np.nonzero(occ)[0]:
        q = seg_pts[k]
        target = _point_at_fraction(guidance, s_guid, s_ctrl[k])
        direction = target - q
        reach = np.linalg.norm(direction)
        if reach < 1e-9:
            continue
        v = direction / reach

        obstacle = 0
        inside = True
        last_occupied = q
        t = step
        while True:
            sample = q + v * t
            if not grid.contains_point(sample):
                raise MarchEscapedGrid("surface march left the grid before finding free space")
            hit = bool(grid.occupied_points(sample[None, :], layer)[0])
            if inside and not hit:
                p = 0.5 * (last_occupied + sample)
                pairs.append(AnchorPair(i0 + int(k), obstacle, p, v.copy()))
                obstacle += 1
                inside = False
            elif not inside and hit:
                inside = True
            if hit:
                last_occupied = sample
            if t >= reach and not hit:
                break
            t += step
    return pairs


def obstacle_distance(q, pair: AnchorPair) -> float:
    """Signed clearance of q along the pair's safe direction."""
    return float((np.asarray(q, dtype=float) - pair.surface_point) @ pair.direction)


# ---------------------------------------------------------------------------
# Cost terms (value, analytic gradient w.r.t. every control point)


def _diff_transpose(g: np.ndarray, dt: float) -> np.ndarray:
    out = np.zeros((g.shape[0] + 1, g.shape[1]))
    out[1:] += g / dt
    out[:-1] -= g / dt
    return out


def cost_smooth(traj: BSplineTrajectory) -> tuple[float, np.ndarray]:
    """Sum of squared jerk control points."""
    dt = traj.knot_spacing
    q = traj.control_points
    jerk = np.diff(q, 3, axis=0) / dt**3
    value = float(np.sum(jerk**2))
    grad = _diff_transpose(_diff_transpose(_diff_transpose(2.0 * jerk, dt), dt), dt)
    return value, grad


def cost_collision(traj: BSplineTrajectory, pairs, safe_clearance: float) -> tuple[float, np.ndarray]:
    """One-sided penalty on anchor distances below the safe clearance.

    Cubic in the shortfall near the clearance, spliced (value, slope and
    curvature continuous) to a quadratic at one clearance depth so gradients
    stay proportionate for deeply buried points.  Zero with zero gradient once
    every pair clears safe_clearance; gradient reaches a control point only
    through its own pairs' directions.
    """
    q = traj.control_points
    grad = np.zeros_like(q)
    value = 0.0
    d0 = safe_clearance
    for pair in pairs:
        d = safe_clearance - obstacle_distance(q[pair.point_index], pair)
        if d <= 0:
            continue
        if d <= d0:
            value += d**3
            slope = 3.0 * d**2
        else:
            e = d - d0
            value += d0**3 + 3.0 * d0**2 * e + 3.0 * d0 * e**2
            slope = 3.0 * d0**2 + 6.0 * d0 * e
        grad[pair.point_index] -= slope * pair.direction
    return float(value), grad


def cost_feasibility(traj: BSplineTrajectory, limits: CostWeights) -> tuple[float, np.ndarray]:
    """One-sided quadratic penalties above the per-axis v/a/j limits."""
    dt = traj.knot_spacing
    q = traj.control_points
    value = 0.0
    grad = np.zeros_like(q)
    deriv = q
    chain: list[np.ndarray] = []
    for limit in (limits.v_max, limits.a_max, limits.j_max):
        if deriv.shape[0] < 2:
            break
        deriv = np.diff(deriv, axis=0) / dt
        chain.append(deriv)
        over = np.maximum(np.abs(deriv) - limit, 0.0)
        value += float(np.sum(over**2))
    for order in range(len(chain), 0, -1):
        deriv = chain[order - 1]
        limit = (limits.v_max, limits.a_max, limits.j_max)[order - 1]
        over = np.maximum(np.abs(deriv) - limit, 0.0)
        g = 2.0 * over * np.sign(deriv)
        for _ in range(order):
            g = _diff_transpose(g, dt)
        grad += g
    return value, grad


def _ground_runs(tags: np.ndarray):
    runs = []
    i = 0
    n = len(tags)
    while i < n:
        if not tags[i]:
            j = i
            while j + 1 < n and not tags[j + 1]:
                j += 1
            runs.append((i, j))
            i = j + 1
        else:
            i += 1
    return runs


def cost_curvature(traj: BSplineTrajectory, curvature_max: float) -> tuple[float, np.ndarray]:
    """Threshold penalty on discrete heading curvature of ground runs.

    For consecutive distinct ground points a, b, c the curvature at b is the
    absolute heading change between (b - a) and (c - b), wrapped to [0, pi],
    divided by |b - a|; only the excess above curvature_max is penalized
    (squared).  Aerial points and triples spanning a mode switch contribute
    nothing.  Exactly coincident consecutive points (clamped-end duplicates)
    collapse to one; distinct points closer than 1e-9 raise DegenerateSpacing.
    """
    q = traj.control_points
    tags = traj.mode_tags if traj.mode_tags is not None else np.zeros(len(q), dtype=bool)
    grad = np.zeros_like(q)
    value = 0.0

    for lo, hi in _ground_runs(tags):
        idxs = [lo]
        for k in range(lo + 1, hi + 1):
            if np.linalg.norm(q[k, :2] - q[idxs[-1], :2]) > 1e-12:
                idxs.append(k)
        for ia, ib, ic in zip(idxs[:-2], idxs[1:-1], idxs[2:]):
            d1 = q[ib, :2] - q[ia, :2]
            d2 = q[ic, :2] - q[ib, :2]
            l1 = float(np.linalg.norm(d1))
            l2 = float(np.linalg.norm(d2))
            if l1 < 1e-9 or l2 < 1e-9:
                raise DegenerateSpacing("consecutive ground control points coincide")
            beta1 = np.arctan2(d1[1], d1[0])
            beta2 = np.arctan2(d2[1], d2[0])
            delta = (beta2 - beta1 + np.pi) % (2.0 * np.pi) - np.pi
            dbeta = abs(delta)
            curv = dbeta / l1
            if curv <= curvature_max:
                continue
            value += (curv - curvature_max) ** 2
            sgn = np.sign(delta) if delta != 0 else 0.0
            coeff = 2.0 * (curv - curvature_max)
            db1_dd1 = np.array([-d1[1], d1[0]]) / l1**2
            db2_dd2 = np.array([-d2[1], d2[0]]) / l2**2
            g_d1 = coeff * (-sgn * db1_dd1 / l1 - (dbeta / l1**2) * (d1 / l1))
            g_d2 = coeff * (sgn * db2_dd2 / l1)
            grad[ia, :2] -= g_d1
            grad[ib, :2] += g_d1 - g_d2
            grad[ic, :2] += g_d2
    return float(value), grad


# ---------------------------------------------------------------------------
# Optimization and post-refinement


def total_cost(traj: BSplineTrajectory, pairs, weights: CostWeights) -> tuple[float, np.ndarray, dict]:
    js, gs = cost_smooth(traj)
    jc, gc = cost_collision(traj, pairs, weights.safe_clearance)
    jf, gf = cost_feasibility(traj, weights)
    jn, gn = cost_curvature(traj, weights.curvature_max)
    value = (
        weights.lambda_smooth * js
        + weights.lambda_collision * jc
        + weights.lambda_feasibility * jf
        + weights.lambda_curvature * jn
    )
    grad = (
        weights.lambda_smooth * gs
        + weights.lambda_collision * gc
        + weights.lambda_feasibility * gf
        + weights.lambda_curvature * gn
    )
    return value, grad, {"smooth": js, "collision": jc, "feasibility": jf, "curvature": jn}


def _free_dofs(traj: BSplineTrajectory):
    p = traj.degree
    n = traj.n_ctrl
    free = range(p, n - p)
    if len(free) == 0:
        raise ValueError("no interior control point free to optimize")
    tags = traj.mode_tags if traj.mode_tags is not None else np.zeros(n, dtype=bool)
    dofs = []
    for i in free:
        axes = (0, 1, 2) if tags[i] else (0, 1)  # ground points stay on the plane
        for ax in axes:
            dofs.append((i, ax))
    return dofs


def optimize(
    traj: BSplineTrajectory,
    pairs,
    weights: CostWeights,
    *,
    max_iters: int = 200,
    grad_tol: float = 1e-5,
    cost_tol: float = 1e-8,
    trace: list | None = None,
) -> tuple[BSplineTrajectory, OptimizationReport]:
    """Quasi-Newton descent over the interior control points.

    The first and last `degree` control points stay fixed (position and end
    derivatives), ground-tagged points keep their altitude, and the accepted
    cost sequence never increases.
    """
    dofs = _free_dofs(traj)
    base = traj.control_points.copy()
    work = traj.copy()
    idx = np.array([d[0] for d in dofs])
    axs = np.array([d[1] for d in dofs])

    def fun(x):
        ctrl = base.copy()
        ctrl[idx, axs] = x
        work.control_points = ctrl
        try:
            value, grad, _ = total_cost(work, pairs, weights)
        except DegenerateSpacing:
            # Singular heading geometry: make the line search back off.
            return np.inf, np.zeros(len(x))
        return value, grad[idx, axs]

    x0 = base[idx, axs]
    result = minimize_lbfgs(
        fun, x0, max_iters=max_iters, grad_tol=grad_tol, cost_tol=cost_tol, trace=trace
    )

    ctrl = base.copy()
    ctrl[idx, axs] = result.x
    out = traj.with_control_points(ctrl)
    _, _, breakdown = total_cost(out, pairs, weights)
    report = OptimizationReport(
        iterations=result.iterations,
        cost=result.cost,
        breakdown=breakdown,
        grad_norm=result.grad_norm,
        scaling_applied=1.0,
        feasible=is_feasible(out, weights, pairs),
        status=result.status,
    )
    return out, report


def derivative_norm_maxima(traj: BSplineTrajectory) -> dict:
    out = {}
    for name, order in (("velocity", 1), ("acceleration", 2), ("jerk", 3)):
        if traj.n_ctrl - order < 1 or traj.degree - order < 0:
            out[name] = 0.0
            continue
        pts = derivative_chain(traj, order).control_points
        out[name] = float(np.max(np.linalg.norm(pts, axis=1))) if len(pts) else 0.0
    return out


def feasibility_scale(traj: BSplineTrajectory, limits: CostWeights) -> float:
    """Knot-spacing stretch restoring the v/a/j limits (1.0 when feasible)."""
    m = derivative_norm_maxima(traj)
    r_v = m["velocity"] / limits.v_max
    r_a = m["acceleration"] / limits.a_max
    r_j = m["jerk"] / limits.j_max
    return max(1.0, r_v, np.sqrt(r_a), np.cbrt(r_j))


def is_feasible(traj: BSplineTrajectory, limits: CostWeights, pairs=()) -> bool:
    m = derivative_norm_maxima(traj)
    tol = 1e-6
    if m["velocity"] > limits.v_max + tol or m["acceleration"] > limits.a_max + tol or m["jerk"] > limits.j_max + tol:
        return False
    return all(obstacle_distance(traj.control_points[p.point_index], p) >= limits.safe_clearance - tol for p in pairs)


def post_refine(traj: BSplineTrajectory, limits: CostWeights) -> BSplineTrajectory:
    """Stretch the knot spacing until every derivative limit holds.

    Control-point geometry is untouched; velocity scales as 1/r, acceleration
    as 1/r^2 and jerk as 1/r^3, so one stretch by the computed factor is
    always enough.  Feasible inputs come back unchanged.
    """
    r = feasibility_scale(traj, limits)
    if r <= 1.0 + 1e-12:
        return traj
    return BSplineTrajectory(
        traj.degree,
        traj.control_points.copy(),
        traj.knot_spacing * r,
        None if traj.mode_tags is None else traj.mode_tags.copy(),
        traj.t0,
    )
