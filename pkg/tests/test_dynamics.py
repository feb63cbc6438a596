import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knode_mpc.dynamics import (
    DragParams,
    DragPlant,
    GimbalLockError,
    NominalModel,
    QuadParams,
    drag_acceleration,
    euler_rate_matrix,
    euler_to_rotation,
    finite_difference_jacobians,
    hover_state,
    mixing_matrix,
    motor_forces_to_input,
    nominal_derivative,
    nominal_jacobians,
    state_difference,
    true_derivative,
    wrap_angle,
)

P = QuadParams()
angles = st.floats(-np.pi / 2 + 0.05, np.pi / 2 - 0.05)


def random_state(rng, speed=3.0):
    x = np.zeros(12)
    x[0:3] = rng.uniform(-5, 5, 3)
    x[3:6] = rng.uniform(-speed, speed, 3)
    x[6:9] = rng.uniform(-0.6, 0.6, 3)
    x[9:12] = rng.uniform(-2, 2, 3)
    return x


class TestRotation:
    def test_identity(self):
        np.testing.assert_array_equal(euler_to_rotation([0, 0, 0]), np.eye(3))

    def test_pure_yaw_maps_body_x_to_world_y(self):
        R = euler_to_rotation([0, 0, np.pi / 2])
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_orthonormal_example(self):
        R = euler_to_rotation([0.1, 0.2, 0.3])
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1) < 1e-12

    @given(angles, angles, st.floats(-np.pi, np.pi))
    def test_orthonormal_property(self, a, b, c):
        R = euler_to_rotation([a, b, c])
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(R) - 1) < 1e-12

    def test_is_zxy_composition(self):
        phi, theta, psi = 0.3, -0.4, 1.1
        Rz = np.array([[np.cos(psi), -np.sin(psi), 0], [np.sin(psi), np.cos(psi), 0], [0, 0, 1]])
        Rx = np.array([[1, 0, 0], [0, np.cos(phi), -np.sin(phi)], [0, np.sin(phi), np.cos(phi)]])
        Ry = np.array([[np.cos(theta), 0, np.sin(theta)], [0, 1, 0], [-np.sin(theta), 0, np.cos(theta)]])
        np.testing.assert_allclose(euler_to_rotation([phi, theta, psi]), Rz @ Rx @ Ry, atol=1e-15)

    def test_rate_matrix_matches_rotation_kinematics(self):
        # body rates from R^T dR/dt must equal W @ eul_dot
        eul = np.array([0.3, -0.2, 0.7])
        eul_dot = np.array([0.5, -1.2, 0.8])
        h = 1e-6
        Rdot = (euler_to_rotation(eul + h * eul_dot) - euler_to_rotation(eul - h * eul_dot)) / (2 * h)
        S = euler_to_rotation(eul).T @ Rdot
        omega = np.array([S[2, 1], S[0, 2], S[1, 0]])
        np.testing.assert_allclose(euler_rate_matrix(eul) @ eul_dot, omega, atol=1e-9)

    def test_gimbal_lock_raises(self):
        with pytest.raises(GimbalLockError):
            euler_to_rotation([np.pi / 2, 0, 0])
        x = hover_state()
        x[6] = np.pi / 2 - 0.001
        with pytest.raises(GimbalLockError):
            nominal_derivative(x, P.hover_input, P)
        with pytest.raises(GimbalLockError):
            nominal_derivative(x[None], P.hover_input[None], P)


class TestNominal:
    def test_hover_equilibrium(self):
        dx = nominal_derivative(hover_state(), P.hover_input, P)
        assert np.max(np.abs(dx)) <= 1e-14

    def test_free_fall(self):
        dx = nominal_derivative(np.zeros(12), np.zeros(4), P)
        expected = np.zeros(12)
        expected[5] = -P.g
        np.testing.assert_array_equal(dx, expected)

    def test_principal_axis_spin_has_no_gyroscopic_torque(self):
        x = np.zeros(12)
        x[9] = 1.0
        np.testing.assert_array_equal(nominal_derivative(x, np.zeros(4), P)[9:], 0.0)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(1)
        X = np.array([random_state(rng) for _ in range(7)])
        U = rng.uniform(0, 8, (7, 4))
        batched = nominal_derivative(X, U, P)
        for i in range(7):
            np.testing.assert_allclose(batched[i], nominal_derivative(X[i], U[i], P), rtol=1e-14, atol=1e-14)

    def test_euler_rates_invert_rate_matrix(self):
        rng = np.random.default_rng(2)
        x = random_state(rng)
        dx = nominal_derivative(x, P.hover_input, P)
        np.testing.assert_allclose(euler_rate_matrix(x[6:9]) @ dx[6:9], x[9:12], atol=1e-13)

    def test_analytic_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(3)
        X = np.array([random_state(rng) for _ in range(5)])
        U = rng.uniform(0, 8, (5, 4))
        A, B = nominal_jacobians(X, U, P)
        Af, Bf = finite_difference_jacobians(lambda a, b: nominal_derivative(a, b, P), X, U)
        np.testing.assert_allclose(A, Af, rtol=1e-7, atol=1e-6)
        np.testing.assert_allclose(B, Bf, rtol=1e-7, atol=1e-6)


class TestMixing:
    def test_symmetric_forces(self):
        p = QuadParams(L=0.1, gamma=0.01)
        np.testing.assert_allclose(motor_forces_to_input([1, 1, 1, 1], p), [4, 0, 0, 0], atol=1e-15)

    def test_single_motor_column(self):
        p = QuadParams(L=0.1, gamma=0.01)
        np.testing.assert_allclose(motor_forces_to_input([0, 1, 0, 0], p), [1, 0.1, 0, -0.01])

    def test_zero(self):
        np.testing.assert_array_equal(motor_forces_to_input(np.zeros(4), P), np.zeros(4))

    def test_negative_force_rejected(self):
        with pytest.raises(ValueError):
            motor_forces_to_input([1, -0.1, 1, 1], P)

    @given(st.lists(st.floats(-1, 1), min_size=3, max_size=3))
    def test_pseudoinverse_reproduces_moments(self, m):
        M = mixing_matrix(P)
        u2 = np.array(m)
        np.testing.assert_allclose(M @ (np.linalg.pinv(M) @ u2), u2, atol=1e-12)


class TestDrag:
    def test_zero_velocity(self):
        np.testing.assert_array_equal(drag_acceleration(hover_state(), DragParams()), 0.0)

    def test_linear_term(self):
        x = hover_state()
        x[3] = 1.0
        d = DragParams((0.3, 0, 0), (0, 0, 0))
        np.testing.assert_allclose(drag_acceleration(x, d), [-0.3, 0, 0], atol=1e-15)

    def test_quadratic_term(self):
        x = hover_state()
        x[3] = 2.0
        d = DragParams((0, 0, 0), (0.1, 0, 0))
        np.testing.assert_allclose(drag_acceleration(x, d), [-0.4, 0, 0], atol=1e-15)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(4)
        X = np.array([random_state(rng) for _ in range(6)])
        d = DragParams()
        np.testing.assert_allclose(drag_acceleration(X, d), [drag_acceleration(x, d) for x in X], atol=1e-14)

    def test_negative_coefficients_rejected(self):
        with pytest.raises(ValueError):
            DragParams((-0.1, 0, 0), (0, 0, 0))

    def test_zero_drag_equals_nominal(self):
        rng = np.random.default_rng(5)
        x, u = random_state(rng), rng.uniform(0, 8, 4)
        np.testing.assert_array_equal(true_derivative(x, u, P, DragParams.zero()), nominal_derivative(x, u, P))

    def test_hover_unaffected(self):
        np.testing.assert_array_equal(true_derivative(hover_state(), P.hover_input, P, DragParams()), 0.0)

    @settings(max_examples=50)
    @given(st.integers(0, 2**31))
    def test_residual_lives_on_velocity_entries(self, seed):
        rng = np.random.default_rng(seed)
        x, u = random_state(rng), rng.uniform(0, 8, 4)
        diff = true_derivative(x, u, P, DragParams()) - nominal_derivative(x, u, P)
        mask = np.ones(12, dtype=bool)
        mask[3:6] = False
        np.testing.assert_array_equal(diff[mask], 0.0)
        assert np.all(diff[3:6] != 0.0)


def test_models_wrap_functions():
    rng = np.random.default_rng(6)
    x, u = random_state(rng), rng.uniform(0, 8, 4)
    np.testing.assert_array_equal(NominalModel(P)(x, u), nominal_derivative(x, u, P))
    np.testing.assert_array_equal(DragPlant(P)(x, u), true_derivative(x, u, P, DragParams()))


def test_state_difference_wraps_angles():
    a, b = hover_state(), hover_state()
    a[8], b[8] = np.pi - 0.1, -np.pi + 0.1
    assert state_difference(a, b)[8] == pytest.approx(-0.2)
    assert wrap_angle(np.pi) == pytest.approx(np.pi)


def test_params_validation():
    with pytest.raises(ValueError):
        QuadParams(m=0)
    with pytest.raises(ValueError):
        QuadParams(J=(1e-3, -1e-3, 1e-3))
