import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agnav.bspline import (
    BASIS_MATRICES,
    BSplineTrajectory,
    basis_matrix,
    derivative_chain,
    fit_from_waypoints,
)
from agnav.errors import DegreeUnderflow, OutOfSpan, Underdetermined

from oracles import cox_de_boor_basis, de_boor_point, uniform_knots


def random_curve(rng, degree=None):
    degree = degree if degree is not None else int(rng.integers(1, 6))
    n = degree + 1 + int(rng.integers(0, 8))
    ctrl = rng.uniform(-5, 5, size=(n, 3))
    dt = float(rng.uniform(0.1, 2.0))
    return BSplineTrajectory(degree, ctrl, dt)


class TestBasisMatrix:
    def test_known_low_degree_matrices(self):
        np.testing.assert_allclose(basis_matrix(1), [[1, 0], [-1, 1]])
        np.testing.assert_allclose(basis_matrix(2), np.array([[1, 1, 0], [-2, 2, 0], [1, -2, 1]]) / 2)
        m4 = np.array([[1, 4, 1, 0], [-3, 0, 3, 0], [3, -6, 3, 0], [-1, 3, -3, 1]]) / 6
        np.testing.assert_allclose(basis_matrix(3), m4)

    def test_partition_of_unity_rows(self):
        for p, m in BASIS_MATRICES.items():
            sums = m.sum(axis=1)
            assert abs(sums[0] - 1.0) < 1e-12
            np.testing.assert_allclose(sums[1:], 0.0, atol=1e-12)

    @pytest.mark.parametrize("degree", [1, 2, 3, 4, 5])
    def test_matches_cox_de_boor_basis_functions(self, degree):
        # theta(u) weights on span j must equal N_{j+k,p}(t) from the recursion.
        n_ctrl = degree + 3
        dt = 0.7
        knots = uniform_knots(n_ctrl, degree, dt)
        traj = BSplineTrajectory(degree, np.zeros((n_ctrl, 3)), dt)
        for t in np.linspace(0.0, traj.duration - 1e-9, 17):
            j, w = traj.basis_weights(t)
            ref = [cox_de_boor_basis(j + k, degree, knots, t) for k in range(degree + 1)]
            np.testing.assert_allclose(w, ref, atol=1e-12)


class TestEvaluate:
    def test_constant_control_points_reproduce_the_point(self):
        traj = BSplineTrajectory(3, np.tile([1.0, 2.0, 3.0], (6, 1)), 0.5)
        for t in np.linspace(0, traj.duration, 9):
            np.testing.assert_allclose(traj.evaluate(t), [1, 2, 3], atol=1e-12)

    def test_degree_one_midspan_interpolates(self):
        traj = BSplineTrajectory(1, [[0, 0, 0], [2, 0, 0]], 1.0)
        np.testing.assert_allclose(traj.evaluate(0.5), [1, 0, 0], atol=1e-12)

    def test_cubic_on_axis_matches_de_boor_recursion(self):
        ctrl = np.array([[float(i), 0, 0] for i in range(6)])
        traj = BSplineTrajectory(3, ctrl, 1.0)
        for t in np.linspace(0, traj.duration, 20):
            ref = de_boor_point(ctrl, 3, 1.0, 0.0, min(t, traj.duration - 1e-12))
            np.testing.assert_allclose(traj.evaluate(t), ref, atol=1e-9)

    def test_matrix_form_equals_de_boor_on_random_curves(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            traj = random_curve(rng)
            ts = rng.uniform(0, traj.duration - 1e-9, size=10)
            ref = np.array([de_boor_point(traj.control_points, traj.degree, traj.knot_spacing, 0.0, t) for t in ts])
            np.testing.assert_allclose(traj.evaluate_many(ts), ref, atol=1e-9)

    def test_out_of_span_raises(self):
        traj = BSplineTrajectory(2, np.zeros((4, 3)), 1.0)
        with pytest.raises(OutOfSpan):
            traj.evaluate(-0.5)
        with pytest.raises(OutOfSpan):
            traj.evaluate(traj.duration + 0.5)

    def test_samples_stay_in_convex_hull_of_active_window(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            traj = random_curve(rng)
            for t in rng.uniform(0, traj.duration, size=5):
                j, w = traj.basis_weights(t)
                assert np.all(w >= -1e-12)
                assert abs(w.sum() - 1.0) < 1e-12
                window = traj.control_points[j : j + traj.degree + 1]
                np.testing.assert_allclose(w @ window, traj.evaluate(t), atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))
    def test_translation_equivariance(self, degree, cx, cy, cz):
        rng = np.random.default_rng(degree)
        traj = random_curve(rng, degree)
        shift = np.array([cx, cy, cz])
        shifted = traj.with_control_points(traj.control_points + shift)
        for t in np.linspace(0, traj.duration, 7):
            np.testing.assert_allclose(shifted.evaluate(t), traj.evaluate(t) + shift, atol=1e-9)


class TestDerivative:
    def test_velocity_control_points_are_scaled_differences(self):
        traj = BSplineTrajectory(2, [[0, 0, 0], [1, 0, 0], [3, 0, 0]], 1.0)
        vel = traj.derivative()
        np.testing.assert_allclose(vel.control_points, [[1, 0, 0], [2, 0, 0]])
        assert vel.degree == 1

    def test_identical_control_points_give_zero_velocity(self):
        traj = BSplineTrajectory(3, np.tile([2.0, -1.0, 0.5], (5, 1)), 0.3)
        np.testing.assert_allclose(traj.derivative().control_points, 0.0, atol=1e-12)

    def test_halving_knot_spacing_doubles_velocity(self):
        ctrl = np.random.default_rng(3).uniform(-1, 1, (6, 3))
        v1 = BSplineTrajectory(3, ctrl, 1.0).derivative().control_points
        v2 = BSplineTrajectory(3, ctrl, 0.5).derivative().control_points
        np.testing.assert_allclose(v2, 2.0 * v1, atol=1e-12)

    def test_time_scaling_laws_exact(self):
        rng = np.random.default_rng(5)
        ctrl = rng.uniform(-2, 2, (8, 3))
        r = 1.7
        base = BSplineTrajectory(3, ctrl, 0.4)
        slow = BSplineTrajectory(3, ctrl, 0.4 * r)
        for order, power in ((1, 1), (2, 2), (3, 3)):
            a = derivative_chain(base, order).control_points
            b = derivative_chain(slow, order).control_points
            np.testing.assert_allclose(b, a / r**power, rtol=1e-12)

    def test_degree_zero_underflow(self):
        flat = BSplineTrajectory(1, [[0, 0, 0], [1, 1, 1]], 1.0).derivative()
        with pytest.raises(DegreeUnderflow):
            flat.derivative()

    def test_finite_difference_of_evaluate_matches_velocity_curve(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            traj = random_curve(rng, 3)
            vel = traj.derivative()
            h = 1e-6
            for t in rng.uniform(h, traj.duration - h, size=4):
                fd = (traj.evaluate(t + h) - traj.evaluate(t - h)) / (2 * h)
                v = vel.evaluate(t)
                denom = max(np.linalg.norm(v), 1.0)
                assert np.linalg.norm(fd - v) / denom < 1e-4


class TestFitFromWaypoints:
    def test_two_waypoints_give_collinear_control_points(self):
        traj = fit_from_waypoints([[0, 0, 0], [4, 2, 0]], 0.5)
        d = np.array([4.0, 2.0, 0.0])
        d /= np.linalg.norm(d)
        rel = traj.control_points - traj.control_points[0]
        offsets = rel - np.outer(rel @ d, d)
        assert np.max(np.linalg.norm(offsets, axis=1)) < 1e-5

    def test_endpoints_interpolated_exactly(self):
        pts = [[0, 0, 0], [1, 1, 0], [2, 0.5, 0], [3, 2, 0]]
        traj = fit_from_waypoints(pts, 0.5)
        np.testing.assert_allclose(traj.evaluate(traj.t0), pts[0], atol=1e-8)
        np.testing.assert_allclose(traj.evaluate(traj.t_end), pts[-1], atol=1e-8)

    def test_l_shaped_path_residual_below_half_resolution(self):
        leg1 = [(x, 0.0, 0.0) for x in np.linspace(0, 2, 5)]
        leg2 = [(2.0, y, 0.0) for y in np.linspace(0.5, 2, 4)]
        pts = np.array(leg1 + leg2)
        traj = fit_from_waypoints(pts, 0.5, tolerance=0.05)
        t_way = np.linspace(traj.t0, traj.t_end, len(pts))
        resid = np.linalg.norm(traj.evaluate_many(t_way) - pts, axis=1)
        assert resid.max() <= 0.05

    def test_single_repeated_waypoint_pads_to_constant_curve(self):
        traj = fit_from_waypoints([[1, 2, 3], [1, 2, 3]], 0.5)
        for t in np.linspace(traj.t0, traj.t_end, 7):
            np.testing.assert_allclose(traj.evaluate(t), [1, 2, 3], atol=1e-6)

    def test_fewer_than_two_waypoints_rejected(self):
        with pytest.raises(Underdetermined):
            fit_from_waypoints([[0, 0, 0]], 0.5)

    def test_start_velocity_pinned(self):
        v0 = np.array([1.0, -0.5, 0.0])
        traj = fit_from_waypoints([[0, 0, 0], [3, 0, 0], [6, 1, 0]], 0.5, start_velocity=v0)
        np.testing.assert_allclose(traj.derivative().evaluate(traj.t0), v0, atol=1e-7)


def test_knot_count_tracks_control_points():
    traj = BSplineTrajectory(3, np.zeros((9, 3)), 0.25)
    assert traj.num_knots == 9 + 3
