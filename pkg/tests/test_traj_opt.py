import numpy as np
import pytest

from agnav.bspline import BSplineTrajectory
from agnav.errors import DegenerateSpacing, MarchEscapedGrid
from agnav.traj_opt import (
    AnchorPair,
    CostWeights,
    assign_mode_tags,
    build_initial_trajectory,
    cost_collision,
    cost_curvature,
    cost_feasibility,
    cost_smooth,
    feasibility_scale,
    generate_anchor_pairs,
    is_feasible,
    obstacle_distance,
    optimize,
    post_refine,
    total_cost,
)
from agnav.voxel_map import VoxelGrid

from oracles import finite_difference_gradient, relative_gradient_error


def make_grid(dims=(12, 12, 6), res=0.5, boxes=()):
    grid = VoxelGrid.empty(np.zeros(3), res, dims)
    for lo, hi in boxes:
        sl = tuple(slice(lo[k], hi[k]) for k in range(3))
        grid.ground_truth[sl] = True
    grid.sensed[:] = grid.ground_truth
    grid.completed[:] = grid.ground_truth
    grid.sensed_once = True
    return grid


def fd_check(term, traj, tol=1e-4):
    """Finite-difference check of one cost term on every control point axis."""
    base = traj.control_points.copy()

    def value_of(flat):
        t2 = traj.with_control_points(flat.reshape(base.shape))
        return term(t2)[0]

    _, grad = term(traj)
    numeric = finite_difference_gradient(value_of, base.ravel()).reshape(base.shape)
    assert relative_gradient_error(grad, numeric) <= tol


class TestBuildInitialTrajectory:
    def test_zero_jitter_gives_collinear_points(self):
        traj = build_initial_trajectory([0, 0, 0], [8, 4, 0], seed=1, jitter=0.0)
        rel = traj.control_points - traj.control_points[0]
        d = np.array([8.0, 4.0, 0.0]) / np.linalg.norm([8, 4, 0])
        off = rel - np.outer(rel @ d, d)
        assert np.max(np.linalg.norm(off, axis=1)) < 1e-12

    def test_fixed_seed_reproduces_curve(self):
        a = build_initial_trajectory([0, 0, 0], [6, 1, 0], seed=9)
        b = build_initial_trajectory([0, 0, 0], [6, 1, 0], seed=9)
        np.testing.assert_array_equal(a.control_points, b.control_points)

    def test_ten_meter_chord_has_21_points_before_padding(self):
        traj = build_initial_trajectory([0, 0, 0], [10, 0, 0], seed=3, spacing=0.5, degree=3)
        assert traj.n_ctrl - 2 * (3 - 1) == 21

    def test_endpoints_and_rest_boundary(self):
        traj = build_initial_trajectory([1, 2, 0], [5, 2, 0], seed=4)
        np.testing.assert_allclose(traj.evaluate(traj.t0), [1, 2, 0], atol=1e-12)
        np.testing.assert_allclose(traj.evaluate(traj.t_end), [5, 2, 0], atol=1e-12)
        np.testing.assert_allclose(traj.derivative().evaluate(traj.t0), 0.0, atol=1e-12)

    def test_jitter_bounded_and_lateral(self):
        traj = build_initial_trajectory([0, 0, 0], [10, 0, 0], seed=5, jitter=0.5)
        interior = traj.control_points[3:-3]
        assert np.max(np.abs(interior[:, 1])) <= 0.5 + 1e-12
        np.testing.assert_allclose(interior[:, 2], 0.0, atol=1e-12)

    def test_start_velocity_ramp(self):
        v0 = np.array([1.0, 0.0, 0.0])
        traj = build_initial_trajectory([0, 0, 0], [5, 0, 0], seed=2, start_velocity=v0)
        np.testing.assert_allclose(traj.derivative().evaluate(traj.t0), v0, atol=1e-9)


class TestAnchorPairs:
    def test_point_in_box_with_guidance_above_points_up(self):
        grid = make_grid(boxes=[((4, 4, 0), (8, 8, 2))])  # box x,y in [2,4], z in [0,1]
        ctrl = np.array([[1.0, 3.0, 0.5], [2.0, 3.0, 0.5], [3.0, 3.0, 0.5], [4.5, 3.0, 0.5], [5.0, 3.0, 0.5]])
        initial = BSplineTrajectory(3, ctrl, 0.5)
        guidance = np.array([[1.0, 3.0, 0.5], [3.0, 3.0, 2.6], [5.0, 3.0, 0.5]])
        pairs = generate_anchor_pairs(initial, guidance, (0, 4), grid)
        stuck = [p for p in pairs if p.point_index == 2]
        assert stuck
        pair = stuck[0]
        assert pair.direction[2] > 0.9  # roughly +z
        # Surface point on the box top face (z = 1.0) within half a voxel.
        assert abs(pair.surface_point[2] - 1.0) <= grid.resolution / 2 + 1e-9

    def test_free_point_emits_nothing(self):
        grid = make_grid(boxes=[((4, 4, 0), (8, 8, 2))])
        ctrl = np.tile([1.0, 1.0, 0.25], (4, 1))
        initial = BSplineTrajectory(3, ctrl, 0.5)
        pairs = generate_anchor_pairs(initial, np.array([[1, 1, 0.25], [1, 2, 0.25]]), (0, 3), grid)
        assert pairs == []

    def test_two_stacked_obstacles_give_two_pairs(self):
        # Two slabs over the stuck point with a free gap between them.
        grid = make_grid(dims=(8, 8, 10), boxes=[((0, 0, 2), (8, 8, 3)), ((0, 0, 5), (8, 8, 6))])
        ctrl = np.tile([2.0, 2.0, 1.25], (4, 1))
        initial = BSplineTrajectory(3, ctrl, 0.5)
        guidance = np.array([[2.0, 2.0, 4.2], [2.0, 2.0, 4.3]])
        pairs = generate_anchor_pairs(initial, guidance, (0, 3), grid)
        js = sorted({p.obstacle_index for p in pairs if p.point_index == 0})
        assert js == [0, 1]

    def test_march_escaping_grid_raises(self):
        grid = make_grid(dims=(6, 6, 4), boxes=[((0, 0, 0), (6, 6, 4))])
        grid.ground_truth[3, 3, 3] = grid.completed[3, 3, 3] = False  # keep start legal-ish
        ctrl = np.tile([1.0, 1.0, 0.25], (4, 1))
        initial = BSplineTrajectory(3, ctrl, 0.5)
        guidance = np.array([[1.0, 1.0, 0.25], [0.2, 0.2, 0.25]])
        with pytest.raises(MarchEscapedGrid):
            generate_anchor_pairs(initial, guidance, (0, 3), grid)


class TestObstacleDistance:
    def test_zero_at_surface_point(self):
        pair = AnchorPair(0, 0, [1, 0, 0], [1, 0, 0])
        assert obstacle_distance([1, 0, 0], pair) == 0.0

    def test_unit_step_along_direction(self):
        pair = AnchorPair(0, 0, [1, 2, 3], [0, 0, 1])
        assert abs(obstacle_distance([1, 2, 4], pair) - 1.0) < 1e-12

    def test_axis_aligned_projection(self):
        pair = AnchorPair(0, 0, [1, 0, 0], [1, 0, 0])
        assert abs(obstacle_distance([2, 0, 0], pair) - 1.0) < 1e-12

    def test_negative_inside(self):
        pair = AnchorPair(0, 0, [1, 0, 0], [1, 0, 0])
        assert obstacle_distance([0.5, 0, 0], pair) < 0


def random_traj(rng, n=10, tags=False):
    ctrl = rng.uniform(-2, 2, size=(n, 3))
    traj = BSplineTrajectory(3, ctrl, float(rng.uniform(0.3, 0.8)))
    if tags:
        traj.mode_tags = rng.random(n) < 0.5
    return traj


class TestCostSmooth:
    def test_collinear_equally_spaced_is_zero(self):
        ctrl = np.outer(np.arange(8), [1.0, 0.5, 0.0])
        value, grad = cost_smooth(BSplineTrajectory(3, ctrl, 0.5))
        assert value == 0.0
        np.testing.assert_allclose(grad, 0.0, atol=1e-12)

    def test_quadratic_scaling(self):
        rng = np.random.default_rng(0)
        traj = random_traj(rng)
        v1, _ = cost_smooth(traj)
        v2, _ = cost_smooth(traj.with_control_points(2.0 * traj.control_points))
        assert abs(v2 - 4.0 * v1) < 1e-9 * max(v1, 1)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            fd_check(cost_smooth, random_traj(rng))


class TestCostCollision:
    def pairs_for(self, traj, rng, n=4):
        out = []
        for _ in range(n):
            i = int(rng.integers(0, traj.n_ctrl))
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            p = traj.control_points[i] + rng.uniform(-0.5, 0.5) * v
            out.append(AnchorPair(i, 0, p, v))
        return out

    def test_dead_zone_is_exactly_zero(self):
        traj = BSplineTrajectory(3, np.zeros((5, 3)), 0.5)
        pair = AnchorPair(2, 0, [-1.0, 0, 0], [1.0, 0, 0])  # D = 1 >= s_f
        value, grad = cost_collision(traj, [pair], 0.3)
        assert value == 0.0 and not grad.any()

    def test_gradient_direction_opposes_safe_direction(self):
        traj = BSplineTrajectory(3, np.zeros((5, 3)), 0.5)
        pair = AnchorPair(2, 0, [-0.2, 0, 0], [1.0, 0, 0])  # D = 0.2 = s_f - 0.1
        value, grad = cost_collision(traj, [pair], 0.3)
        assert value > 0
        direction = grad[2] / np.linalg.norm(grad[2])
        np.testing.assert_allclose(direction, -pair.direction, atol=1e-12)
        assert not grad[[0, 1, 3, 4]].any()

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            traj = random_traj(rng)
            pairs = self.pairs_for(traj, rng)
            fd_check(lambda t: cost_collision(t, pairs, 0.4), traj)


class TestCostFeasibility:
    def test_stationary_trajectory_is_zero(self):
        traj = BSplineTrajectory(3, np.tile([1.0, 1.0, 0.0], (6, 1)), 0.5)
        value, grad = cost_feasibility(traj, CostWeights())
        assert value == 0.0 and not grad.any()

    def test_single_hot_velocity_point_localizes_gradient(self):
        w = CostWeights()
        ctrl = np.zeros((6, 3))
        ctrl[3:, 0] = 2.0 * w.v_max * 0.5  # one velocity control point at 2*v_max on x
        traj = BSplineTrajectory(3, ctrl, 0.5)
        vel = np.diff(ctrl, axis=0) / 0.5
        assert np.isclose(np.abs(vel).max(), 2 * w.v_max)
        limits = CostWeights(a_max=100.0, j_max=1000.0)  # isolate the velocity term
        value, grad = cost_feasibility(traj, limits)
        assert value > 0
        assert grad[2].any() and grad[3].any()
        assert not grad[[0, 1, 4, 5]].any()

    def test_within_limits_is_zero(self):
        ctrl = np.outer(np.arange(6), [0.4, 0.0, 0.0])
        traj = BSplineTrajectory(3, ctrl, 0.5)
        value, _ = cost_feasibility(traj, CostWeights())
        assert value == 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        limits = CostWeights(v_max=1.0, a_max=2.0, j_max=4.0)
        for _ in range(10):
            traj = random_traj(rng)
            fd_check(lambda t: cost_feasibility(t, limits), traj)


class TestCostCurvature:
    def test_collinear_ground_points_cost_nothing(self):
        ctrl = np.outer(np.arange(6), [1.0, 0.0, 0.0])
        value, grad = cost_curvature(BSplineTrajectory(3, ctrl, 0.5), 1.0)
        assert value == 0.0 and not grad.any()

    def test_right_angle_corner_with_unit_legs(self):
        ctrl = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 2, 0]], dtype=float)
        value, _ = cost_curvature(BSplineTrajectory(3, ctrl, 0.5), 1.0)
        assert abs(value - (np.pi / 2 - 1.0) ** 2) < 1e-9

    def test_all_aerial_costs_nothing(self):
        rng = np.random.default_rng(4)
        traj = random_traj(rng)
        traj.mode_tags = np.ones(traj.n_ctrl, dtype=bool)
        value, grad = cost_curvature(traj, 0.1)
        assert value == 0.0 and not grad.any()

    def test_mode_switch_straddle_skipped(self):
        ctrl = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 2.0], [1, 2, 0]], dtype=float)
        traj = BSplineTrajectory(3, ctrl, 0.5)
        traj.mode_tags = np.array([False, False, True, False])
        value, _ = cost_curvature(traj, 0.1)
        assert value == 0.0  # no 3 consecutive ground points remain

    def test_exact_duplicates_collapse_instead_of_raising(self):
        ctrl = np.array([[0, 0, 0], [0, 0, 0], [1, 0, 0], [1, 1, 0], [1, 2, 0]], dtype=float)
        value, _ = cost_curvature(BSplineTrajectory(3, ctrl, 0.5), 1.0)
        assert abs(value - (np.pi / 2 - 1.0) ** 2) < 1e-9

    def test_near_coincident_distinct_points_raise(self):
        ctrl = np.array([[0, 0, 0], [1e-10, 0, 0], [1, 0, 0], [1, 1, 0]], dtype=float)
        with pytest.raises(DegenerateSpacing):
            cost_curvature(BSplineTrajectory(3, ctrl, 0.5), 1.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        done = 0
        while done < 10:
            traj = random_traj(rng, n=8)
            traj.mode_tags = np.zeros(8, dtype=bool)
            # Stay away from the penalty threshold and heading-wrap kinks,
            # where one-sided finite differences are meaningless.
            if not _smooth_configuration(traj, curvature_max=0.5):
                continue
            fd_check(lambda t: cost_curvature(t, 0.5), traj)
            done += 1


def _smooth_configuration(traj, curvature_max, margin=0.05):
    q = traj.control_points
    for k in range(1, len(q) - 1):
        d1 = q[k, :2] - q[k - 1, :2]
        d2 = q[k + 1, :2] - q[k, :2]
        l1, l2 = np.linalg.norm(d1), np.linalg.norm(d2)
        if l1 < 0.1 or l2 < 0.1:
            return False
        delta = (np.arctan2(d2[1], d2[0]) - np.arctan2(d1[1], d1[0]) + np.pi) % (2 * np.pi) - np.pi
        if abs(abs(delta) / l1 - curvature_max) < margin or abs(delta) < 0.05 or abs(abs(delta) - np.pi) < 0.05:
            return False
    return True


class TestOptimize:
    def test_straight_free_trajectory_returned_unchanged(self):
        ctrl = np.outer(np.arange(10), [0.5, 0.0, 0.0])
        traj = BSplineTrajectory(3, ctrl, 0.5)
        out, report = optimize(traj, [], CostWeights())
        assert report.cost < 1e-12
        np.testing.assert_allclose(out.control_points, ctrl, atol=1e-6)

    def test_collision_pairs_push_points_past_clearance(self):
        grid = make_grid(boxes=[((4, 4, 0), (8, 8, 1))])  # shallow slab, top at z=0.5
        start, goal = np.array([1.0, 3.0, 0.0]), np.array([5.5, 3.0, 0.0])
        traj = build_initial_trajectory(start, goal, seed=0, jitter=0.0, knot_spacing=1.0)
        traj = assign_mode_tags(traj, 0.3)
        guidance = np.array([[1.0, 3.0, 0.0], [3.0, 3.0, 1.4], [5.5, 3.0, 0.0]])
        occ = grid.occupied_points(traj.control_points, "completed")
        tags = traj.mode_tags.copy()
        tags[occ] = True  # the stuck stretch may climb
        traj.mode_tags = tags
        weights = CostWeights(lambda_smooth=0.1)
        pairs = generate_anchor_pairs(traj, guidance, (0, traj.n_ctrl - 1), grid)
        assert pairs
        out, report = optimize(traj, pairs, weights)
        dists = [obstacle_distance(out.control_points[p.point_index], p) for p in pairs]
        # The spliced penalty is flat at the clearance, so descent enters the
        # dead zone asymptotically; allow the first-order equilibrium gap.
        assert min(dists) >= weights.safe_clearance - 0.02
        # Occupancy oracle on the stuck points themselves: all escaped the slab.
        stuck = sorted({p.point_index for p in pairs})
        assert not grid.occupied_points(out.control_points[stuck], "completed").any()
        assert report.cost <= total_cost(traj, pairs, weights)[0] + 1e-12

    def test_cost_sequence_monotone_nonincreasing(self):
        rng = np.random.default_rng(6)
        traj = random_traj(rng, n=12)
        traj.mode_tags = np.ones(12, dtype=bool)
        trace = []
        optimize(traj, [], CostWeights(), trace=trace)
        costs = [t["cost"] for t in trace]
        assert all(b <= a + 1e-12 for a, b in zip(costs, costs[1:]))

    def test_endpoints_stay_fixed(self):
        rng = np.random.default_rng(7)
        traj = random_traj(rng, n=12)
        traj.mode_tags = np.ones(12, dtype=bool)
        out, _ = optimize(traj, [], CostWeights())
        np.testing.assert_array_equal(out.control_points[:3], traj.control_points[:3])
        np.testing.assert_array_equal(out.control_points[-3:], traj.control_points[-3:])

    def test_ground_points_keep_altitude(self):
        rng = np.random.default_rng(8)
        traj = random_traj(rng, n=12)
        traj.control_points[:, 2] = 0.0
        traj.mode_tags = np.zeros(12, dtype=bool)
        out, _ = optimize(traj, [], CostWeights())
        np.testing.assert_allclose(out.control_points[:, 2], 0.0, atol=1e-12)


class TestPostRefine:
    def test_feasible_input_unchanged(self):
        ctrl = np.outer(np.arange(8), [0.3, 0.0, 0.0])
        traj = BSplineTrajectory(3, ctrl, 0.5)
        out = post_refine(traj, CostWeights())
        assert out.knot_spacing == traj.knot_spacing

    def test_double_speed_doubles_knot_spacing(self):
        w = CostWeights(v_max=1.0, a_max=1e6, j_max=1e9)
        # Straight line with |V| = 2 * v_max and negligible accel/jerk.
        ctrl = np.outer(np.arange(8), [1.0, 0.0, 0.0])
        traj = BSplineTrajectory(3, ctrl, 0.5)  # velocity = 2 m/s
        out = post_refine(traj, w)
        assert abs(out.knot_spacing - 1.0) < 1e-12
        assert is_feasible(out, w)

    def test_random_infeasible_trajectories_become_feasible(self):
        rng = np.random.default_rng(9)
        w = CostWeights(v_max=1.0, a_max=2.0, j_max=4.0)
        for _ in range(25):
            traj = random_traj(rng, n=9)
            traj.knot_spacing = float(rng.uniform(0.05, 0.2))
            out = post_refine(traj, w)
            assert is_feasible(out, w)
            np.testing.assert_array_equal(out.control_points, traj.control_points)

    def test_scaling_laws_in_scale_factor(self):
        w = CostWeights(v_max=1.0, a_max=2.0, j_max=4.0)
        rng = np.random.default_rng(10)
        traj = random_traj(rng, n=9)
        r = feasibility_scale(traj, w)
        if r > 1:
            out = post_refine(traj, w)
            assert abs(out.knot_spacing - traj.knot_spacing * r) < 1e-12
