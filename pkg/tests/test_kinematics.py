import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from socialmpc.core import ControlInput, VehicleParams, VehicleState
from socialmpc.kinematics import bicycle_derivative, discrete_step, linearize, rk4_step

SYM = VehicleParams(l_f=1.5, l_r=1.5)
# high-precision (mpmath, 30 digits) evaluation of the yaw rate for v=10, delta=0.1, l_r=l_f=1.5
PSI_DOT_ORACLE = 0.334028835615940221585905419448


def test_straight_line():
    assert np.allclose(bicycle_derivative(VehicleState(0, 10, 0, 0), ControlInput(0, 0), SYM), [10, 0, 0, 0])


def test_pure_acceleration():
    assert np.allclose(bicycle_derivative(np.array([0, 10, 0, 0.0]), np.array([2.0, 0]), SYM), [10, 2, 0, 0])


def test_yaw_rate_matches_high_precision_oracle():
    d = bicycle_derivative(np.array([0, 10, 0, 0.0]), np.array([0, 0.1]), SYM)
    assert d[3] == pytest.approx(PSI_DOT_ORACLE, abs=1e-12)
    assert d[3] == pytest.approx(0.3340, abs=5e-5)


def test_steering_domain_error():
    with pytest.raises(ValueError):
        bicycle_derivative(np.zeros(4), np.array([0, np.pi / 2]), SYM)


@pytest.mark.parametrize("v, lr, lf, a23, b31", [(10, 1.5, 1.5, 10, 10 / 3), (0, 1.5, 1.5, 0, 0),
                                                 (25, 1.2, 1.8, 25, 25 / 3)])
def test_linearize_values(v, lr, lf, a23, b31):
    lin = linearize(v, VehicleParams(l_f=lf, l_r=lr))
    assert lin.A[2, 3] == pytest.approx(a23)
    assert lin.B[3, 1] == pytest.approx(b31)


@given(st.floats(0, 40))
def test_linearize_sparsity(v):
    lin = linearize(v, VehicleParams())
    mask_A = np.zeros((4, 4), bool)
    mask_A[0, 1] = mask_A[2, 3] = True
    mask_B = np.zeros((4, 2), bool)
    mask_B[1, 0] = mask_B[3, 1] = True
    assert np.all(lin.A[~mask_A] == 0) and lin.A[0, 1] == 1.0
    assert np.all(lin.B[~mask_B] == 0) and lin.B[1, 0] == 1.0


def test_linearize_rejects_negative_speed():
    with pytest.raises(ValueError):
        linearize(-1.0, VehicleParams())


@pytest.mark.parametrize("v", [5.0, 20.0, 33.0])
def test_linearization_matches_finite_difference_jacobian(v):
    p = VehicleParams()
    x0, u0, h = np.array([0.0, v, 0.0, 0.0]), np.zeros(2), 1e-6
    JA = np.zeros((4, 4))
    JB = np.zeros((4, 2))
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        JA[:, i] = (bicycle_derivative(x0 + e, u0, p) - bicycle_derivative(x0 - e, u0, p)) / (2 * h)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        JB[:, i] = (bicycle_derivative(x0, u0 + e, p) - bicycle_derivative(x0, u0 - e, p)) / (2 * h)
    lin = linearize(v, p)
    assert np.max(np.abs(JA - lin.A)) < 1e-8
    # The linear input matrix keeps only the yaw channel of the steering; the
    # slip-angle contribution to lateral speed, v*l_r/(l_r+l_f), is dropped.
    dropped = np.zeros((4, 2), bool)
    dropped[2, 1] = True
    assert np.max(np.abs((JB - lin.B)[~dropped])) < 1e-8
    assert JB[2, 1] == pytest.approx(v * p.l_r / p.wheelbase, rel=1e-6)


def test_discrete_step_examples():
    lin = linearize(10, VehicleParams())
    assert discrete_step(VehicleState(0, 10, 0, 0), ControlInput(0, 0), lin, 0.1).as_array() == pytest.approx([1, 10, 0, 0])
    y = discrete_step(VehicleState(0, 10, 0, 0.1), ControlInput(0, 0), lin, 0.1).y
    assert y == pytest.approx(0.1)
    assert discrete_step(VehicleState(0, 10, 0, 0), ControlInput(1, 0), lin, 0.1).v == pytest.approx(10.1)


@given(st.floats(-100, 100), st.floats(0, 40), st.floats(-5, 5), st.floats(0.01, 0.5))
def test_discrete_step_straight_is_exact(s, v, y, dt):
    out = discrete_step(np.array([s, v, y, 0.0]), np.zeros(2), linearize(v, VehicleParams()), dt)
    assert out.s == s + v * dt and out.v == v and out.y == y and out.psi == 0.0


def _step_errors(x, u, dts):
    p = VehicleParams()
    return [discrete_step(x, u, linearize(x[1], p), dt).as_array() - rk4_step(x, u, p, dt) for dt in dts]


def test_euler_vs_rk4_second_order_without_steering():
    """One linearized step against RK4 of the nonlinear model: halving dt quarters the error."""
    x = np.array([0.0, 15.0, 0.0, 0.01])
    dts = (0.1, 0.05, 0.025)
    errs = np.abs(_step_errors(x, np.array([0.5, 0.0]), dts))
    for dt, e in zip(dts, errs):
        assert np.all(e < 0.5 * dt**2)  # component scale 1 m/s^2 covers a = 0.5 and v*psi_dot
    for comp in (0, 2):
        assert errs[0, comp] / errs[1, comp] == pytest.approx(4.0, rel=0.1)
        assert errs[1, comp] / errs[2, comp] == pytest.approx(4.0, rel=0.1)


@pytest.mark.parametrize("delta", [0.02, 0.05])
def test_euler_vs_rk4_with_steering(delta):
    """With steering, s, v and psi stay within the second-order bound, while
    the slip-angle term absent from the linear lateral row leaves a
    first-order lateral drift of roughly v*sin(phi)*dt."""
    x = np.array([0.0, 15.0, 0.0, 0.01])
    dts = (0.1, 0.05, 0.025)
    errs = np.abs(_step_errors(x, np.array([0.5, delta]), dts))
    for dt, e in zip(dts, errs):
        assert e[0] < 0.5 * dt**2 and e[1] == 0.0 and e[3] < 0.5 * dt**2
    p = VehicleParams()
    phi = np.arctan(p.l_r / p.wheelbase * np.tan(delta))
    for dt, e in zip(dts, errs):
        assert x[1] * np.sin(phi) * dt <= e[2] <= 1.5 * x[1] * np.sin(phi) * dt
    assert errs[1, 2] / errs[2, 2] == pytest.approx(2.0, rel=0.15)
