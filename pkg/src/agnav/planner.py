"""End-to-end pipeline: seed curve, guidance searches, rebound optimization.

One planning call runs: naive initial trajectory -> collision segments ->
per-segment lattice search for guidance -> anchor pairs -> quasi-Newton
refinement, looping until the curve is clean or the retry cap hits, then a
knot-spacing post-refinement.  Every Success result has been dense-sampled
against the layer it was planned on.  When the loop cannot clean the curve,
the collision-free guidance path itself is fitted and returned (degraded but
safe); when even guidance fails the result is NoPath.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import hybrid_astar as ha
from .bspline import BSplineTrajectory, fit_from_waypoints
from .errors import MarchEscapedGrid, NoPathError, SearchTimeout
from .traj_opt import (
    CostWeights,
    assign_mode_tags,
    build_initial_trajectory,
    derivative_norm_maxima,
    feasibility_scale,
    generate_anchor_pairs,
    optimize,
    post_refine,
)
from .voxel_map import VoxelGrid

SUCCESS = "success"
NO_PATH = "no_path"
INFEASIBLE = "infeasible"


@dataclass
class PlanRequest:
    start: ha.RobotState
    goal: np.ndarray
    grid: VoxelGrid
    search: ha.SearchConfig = field(default_factory=ha.SearchConfig)
    weights: CostWeights = field(default_factory=CostWeights)
    horizon: float = np.inf  # meters of chord to plan, rest deferred
    replan_period: float = 0.5
    knot_spacing: float = 0.5
    degree: int = 3
    ctrl_spacing: float = 0.5
    jitter: float = 0.5
    retry_rounds: int = 3
    dt_scale_cap: float = 10.0
    seed: int = 0
    max_segment_span: int = 8  # split longer collision segments at free points
    segment_budget: int = 2000  # expansion cap per guidance sub-search
    cruise_fraction: float = 0.9  # retime so peak speed sits near this * v_max

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=float)
        if self.horizon <= 0 or self.replan_period <= 0:
            raise ValueError("horizon and replan_period must be positive")


@dataclass
class PlanResult:
    status: str
    trajectory: BSplineTrajectory | None
    mode_switch_events: list
    planning_time: float
    rounds: int = 0
    used_fallback: bool = False
    cost_breakdown: dict = field(default_factory=dict)
    reused: bool = False  # previous trajectory returned unchanged


def mode_switch_events(traj: BSplineTrajectory, ground_threshold: float) -> list:
    """(time, transition) pairs from maximal aerial runs of control points.

    A ground->aerial event fires at the reference time of the first control
    point above the threshold in each run, aerial->ground at the run's end.
    """
    z = traj.control_points[:, 2]
    aerial = z > ground_threshold
    times = traj.greville_times()
    events = []
    i, n = 0, len(z)
    while i < n:
        if aerial[i]:
            j = i
            while j + 1 < n and aerial[j + 1]:
                j += 1
            events.append((float(times[i]), "ground->aerial"))
            end_t = float(times[j + 1]) if j + 1 < n else float(traj.t_end)
            events.append((end_t, "aerial->ground"))
            i = j + 1
        else:
            i += 1
    return events


def _state_at(point, velocity, config: ha.SearchConfig) -> ha.RobotState:
    point = np.asarray(point, dtype=float)
    if point[2] > config.ground_plane + 1e-6:
        return ha.RobotState(point, np.asarray(velocity, dtype=float), ha.AERIAL)
    pos = point.copy()
    pos[2] = config.ground_plane
    vel = np.asarray(velocity, dtype=float).copy()
    vel[2] = 0.0
    return ha.RobotState(pos, vel, ha.GROUND)


def _dense_times(traj: BSplineTrajectory, grid: VoxelGrid):
    vel = traj.derivative().control_points
    v_hi = float(np.max(np.linalg.norm(vel, axis=1))) if len(vel) else 0.0
    spacing_t = (grid.resolution / 2.0) / max(v_hi, 1e-6)
    n = min(max(2, int(np.ceil(traj.duration / spacing_t)) + 1), 20000)
    return np.linspace(traj.t0, traj.t_end, n)


def dense_collision_free(traj: BSplineTrajectory, grid: VoxelGrid, layer: str = "completed") -> bool:
    """Occupancy scan of the whole curve at <= half-voxel spatial spacing."""
    pts = traj.evaluate_many(_dense_times(traj, grid))
    return not grid.occupied_points(pts, layer).any()


def _violation_segments(traj: BSplineTrajectory, grid: VoxelGrid, layer: str) -> list:
    """Control-point collision runs plus runs backing dense-sample violations."""
    occ_ctrl = grid.occupied_points(traj.control_points, layer)
    segments = ha.extract_collision_segments(traj, grid, layer)

    ts = _dense_times(traj, grid)
    pts = traj.evaluate_many(ts)
    bad = grid.occupied_points(pts, layer)
    if bad.any():
        p = traj.degree
        n = traj.n_ctrl
        idx = np.round((ts[bad] - traj.t0) / traj.knot_spacing + (p - 1) / 2.0).astype(int)
        idx = np.clip(idx, 0, n - 1)
        for i in np.unique(idx):
            lo = hi = int(i)
            while lo > 0 and occ_ctrl[lo]:
                lo -= 1
            while hi < n - 1 and occ_ctrl[hi]:
                hi += 1
            segments.append((max(lo - 1, 0), min(hi + 1, n - 1)))

    segments.sort()
    merged = []
    for lo, hi in segments:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(hi, merged[-1][1]))
        else:
            merged.append((lo, hi))
    return merged


def _split_segments(segments, occ_ctrl, max_span: int):
    """Break long runs at free control points so guidance searches stay local."""
    out = []
    for lo, hi in segments:
        while hi - lo > max_span:
            cut = None
            for k in range(lo + max_span, lo, -1):
                if k < len(occ_ctrl) and not occ_ctrl[k] and k < hi:
                    cut = k
                    break
            if cut is None:
                break
            out.append((lo, cut))
            lo = cut
        out.append((lo, hi))
    return out


def _guidance_for_segment(traj, seg, request, layer):
    config = replace(request.search, max_expansions=min(request.search.max_expansions, request.segment_budget))
    start = _state_at(traj.control_points[seg[0]], np.zeros(3), config)
    goal = traj.control_points[seg[1]].copy()
    if goal[2] <= config.ground_plane + 1e-6:
        goal[2] = config.ground_plane
    return ha.search(start, goal, request.grid, config, layer=layer)


def _downsample(poly: np.ndarray, spacing: float) -> np.ndarray:
    keep = [0]
    for k in range(1, len(poly)):
        if np.linalg.norm(poly[k] - poly[keep[-1]]) >= spacing or k == len(poly) - 1:
            keep.append(k)
    return poly[keep]


def _fit_polyline(poly, request: PlanRequest, velocity, grid, layer) -> BSplineTrajectory | None:
    """Fit a safe spline to a collision-free polyline, coarse first.

    Coarser waypoint spacing gives smoother geometry (and a faster trajectory
    after retiming); finer spacings are tried until the dense occupancy scan
    passes.  Returns None when even the finest fit clips an obstacle.
    """
    for spacing, tol in (
        (2.0 * request.ctrl_spacing, request.grid.resolution),
        (request.ctrl_spacing, request.grid.resolution),
        (request.ctrl_spacing / 2.0, request.grid.resolution / 2.0),
    ):
        waypoints = _downsample(poly, spacing)
        if len(waypoints) < 2:
            continue
        traj = fit_from_waypoints(
            waypoints, request.knot_spacing, request.degree, tolerance=tol, start_velocity=velocity
        )
        traj = assign_mode_tags(traj, request.search.ground_threshold)
        if dense_collision_free(traj, grid, layer):
            return traj
    return None


def _fit_guidance(path: ha.GuidancePath, request: PlanRequest, velocity, grid, layer, goal):
    poly = path.dense_polyline()
    # The lattice stops inside the tolerance ball; close the last hop so the
    # executed trajectory actually reaches the goal point.
    hop = np.asarray(goal, dtype=float) - poly[-1]
    hop_len = np.linalg.norm(hop)
    if hop_len > 1e-9:
        n = max(2, int(np.ceil(hop_len / (grid.resolution / 2.0))) + 1)
        bridge = poly[-1] + np.linspace(0.0, 1.0, n)[:, None] * hop
        if not grid.occupied_points(bridge, layer).any():
            poly = np.vstack([poly, bridge[1:]])
    return _fit_polyline(poly, request, velocity, grid, layer)


def _retime(traj: BSplineTrajectory, request: PlanRequest) -> BSplineTrajectory:
    """Shrink the knot spacing of an over-slow result toward cruise speed.

    Geometry is untouched; only speeds below the cruise target are raised.
    Over-speed (and the accel/jerk it implies) is post_refine's job.
    """
    peak = derivative_norm_maxima(traj)["velocity"]
    target = request.cruise_fraction * request.search.v_max
    if peak < 1e-9 or peak >= target:
        return traj
    r = peak / target
    return BSplineTrajectory(
        traj.degree,
        traj.control_points.copy(),
        traj.knot_spacing * r,
        None if traj.mode_tags is None else traj.mode_tags.copy(),
        traj.t0,
    )


def _degenerate_result(request: PlanRequest, t_start: float) -> PlanResult:
    p = request.degree
    ctrl = np.tile(request.start.position, (p + 1, 1))
    traj = BSplineTrajectory(p, ctrl, request.knot_spacing)
    traj = assign_mode_tags(traj, request.search.ground_threshold)
    return PlanResult(SUCCESS, traj, [], time.perf_counter() - t_start)


def plan(request: PlanRequest, initial_guess: BSplineTrajectory | None = None) -> PlanResult:
    """Full planning pipeline from the request's start state to its goal.

    `initial_guess` (e.g. the previous trajectory during replanning) replaces
    the naive seed curve; a clean guess skips optimization entirely.
    """
    t_start = time.perf_counter()
    grid = request.grid
    layer = "completed"
    config = request.search

    goal = request.goal
    dist = float(np.linalg.norm(goal - request.start.position))
    if dist <= config.goal_tolerance:
        return _degenerate_result(request, t_start)
    if np.isfinite(request.horizon) and request.horizon < dist:
        goal = request.start.position + (goal - request.start.position) * (request.horizon / dist)
        lift = goal.copy()
        while grid.occupied_points(lift[None, :], layer)[0] and lift[2] < grid.extent[2]:
            lift[2] += grid.resolution  # slide the horizon goal out of obstacles
        goal = lift

    if initial_guess is not None:
        traj = initial_guess
        smoothed = True
    else:
        traj = build_initial_trajectory(
            request.start.position,
            goal,
            request.seed,
            spacing=request.ctrl_spacing,
            jitter=request.jitter,
            knot_spacing=request.knot_spacing,
            degree=request.degree,
            start_velocity=request.start.velocity,
        )
        traj = assign_mode_tags(traj, config.ground_threshold)
        smoothed = False

    rounds = 0
    breakdown: dict = {}
    prev_violations = None
    for _ in range(request.retry_rounds):
        segments = _violation_segments(traj, grid, layer)
        if not segments and smoothed:
            break
        if prev_violations is not None and len(segments) >= prev_violations:
            break  # no progress; hand over to the guidance fallback
        prev_violations = len(segments) if segments else None
        occ_ctrl = grid.occupied_points(traj.control_points, layer)
        segments = _split_segments(segments, occ_ctrl, request.max_segment_span)
        pairs = []
        for seg in segments:
            try:
                guide = _guidance_for_segment(traj, seg, request, layer)
            except (NoPathError, SearchTimeout):
                continue
            try:
                pairs.extend(generate_anchor_pairs(traj, guide.dense_polyline(), seg, grid, layer=layer))
            except MarchEscapedGrid:
                continue
        if segments and not pairs:
            break  # nothing actionable; hand over to the guidance fallback
        tags = traj.mode_tags.copy() if traj.mode_tags is not None else np.zeros(traj.n_ctrl, dtype=bool)
        for pair in pairs:
            if pair.direction[2] > 0.3:
                tags[pair.point_index] = True
        traj.mode_tags = tags
        traj, report = optimize(traj, pairs, request.weights)
        breakdown = report.breakdown
        smoothed = True
        rounds += 1

    used_fallback = False
    if _violation_segments(traj, grid, layer) or not dense_collision_free(traj, grid, layer):
        # Rebound failed to clean the curve: fall back to the guidance path.
        try:
            guidance = ha.search(
                _state_at(request.start.position, request.start.velocity, config), goal, grid, config, layer=layer
            )
        except (NoPathError, SearchTimeout):
            return PlanResult(NO_PATH, None, [], time.perf_counter() - t_start, rounds)
        traj = _fit_guidance(guidance, request, request.start.velocity, grid, layer, goal)
        used_fallback = True
        if traj is None:
            return PlanResult(INFEASIBLE, None, [], time.perf_counter() - t_start, rounds, True)

    traj = _retime(traj, request)
    scale = feasibility_scale(traj, request.weights)
    if scale > request.dt_scale_cap:
        return PlanResult(INFEASIBLE, traj, [], time.perf_counter() - t_start, rounds, used_fallback)
    traj = post_refine(traj, request.weights)
    traj = assign_mode_tags(traj, config.ground_threshold)
    events = mode_switch_events(traj, config.ground_threshold)
    return PlanResult(
        SUCCESS, traj, events, time.perf_counter() - t_start, rounds, used_fallback, breakdown
    )


def replan_step(
    current: ha.RobotState,
    request: PlanRequest,
    grid: VoxelGrid,
    previous: PlanResult | None = None,
) -> PlanResult:
    """Plan from the robot's current state against a fresh map snapshot.

    When the previous trajectory is still collision-free on the new map it is
    refitted from the current state and used as the initial guess; otherwise
    the pipeline rebuilds from scratch.
    """
    req = replace(request, start=current, grid=grid)
    if np.linalg.norm(request.goal - current.position) <= request.search.goal_tolerance:
        return _degenerate_result(req, time.perf_counter())

    guess = None
    prev_traj = previous.trajectory if previous is not None and previous.status == SUCCESS else None
    if prev_traj is not None and np.linalg.norm(
        prev_traj.evaluate(prev_traj.t_end) - request.goal
    ) <= request.search.goal_tolerance:
        t_reuse = time.perf_counter()
        ts = _dense_times(prev_traj, grid)
        pts = prev_traj.evaluate_many(ts)
        gaps = np.linalg.norm(pts - current.position, axis=1)
        near = int(np.argmin(gaps))
        tail = pts[near:]
        if len(tail) >= 2 and not grid.occupied_points(tail, "completed").any():
            if gaps[near] <= request.ctrl_spacing:
                # Robot is on the still-valid curve: keep tracking it as is.
                return replace(previous, planning_time=time.perf_counter() - t_reuse, reused=True)
            try:
                guess = _fit_polyline(tail, req, current.velocity, grid, "completed")
            except Exception:
                guess = None
    return plan(req, initial_guess=guess)
