import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from schwarz_ct.controllability import (
    NotControllableError,
    check_ucc,
    dual_ucc_constants,
    gramian,
    shifted_ucc_constants,
    zero_steering_control,
)
from schwarz_ct.ode_engine import IntegratorConfig, TimeGrid, integrate_ivp


def const(m):
    m = np.atleast_2d(np.asarray(m, dtype=float))
    return lambda t: m


def test_gramian_of_pure_integrator():
    W = gramian(const(np.zeros((2, 2))), const(np.eye(2)), 0.0, 0.7)
    np.testing.assert_allclose(W, 0.7 * np.eye(2), atol=1e-12)


def test_gramian_unreachable_state():
    W = gramian(const(np.zeros((2, 2))), const([[1.0], [0.0]]), 0.0, 1.0)
    np.testing.assert_allclose(W, [[1.0, 0.0], [0.0, 0.0]], atol=1e-12)
    assert np.linalg.matrix_rank(W) == 1


def test_gramian_scalar_closed_form():
    # Phi(0, s) = e^{s} for a = -1
    W = gramian(const([[-1.0]]), const([[1.0]]), 0.0, 1.0, quad_panels=64)
    assert abs(W[0, 0] - (np.e**2 - 1) / 2) <= 1e-8


def test_ucc_of_pure_integrator():
    rep = check_ucc(const(np.zeros((2, 2))), const(np.eye(2)), 0.5, 3.0, scan_points=5)
    for v in (rep.alpha0, rep.alpha1, rep.beta0, rep.beta1):
        assert v == pytest.approx(0.5, abs=1e-12)
    assert rep.passed


def test_ucc_benchmark_pair():
    A, B = const(np.diag([-1.0, -4.0])), const(np.diag([1.0, 0.25]))
    rep = check_ucc(A, B, 1.0, 5.0, quad_panels=64)
    assert rep.passed
    # diagonal Gramian entries int_0^1 e^{2 xi_i s} b_i^2 ds
    assert rep.alpha0 == pytest.approx(np.expm1(2.0) / 2.0, rel=1e-6)
    assert rep.alpha1 == pytest.approx(0.0625 * np.expm1(8.0) / 8.0, rel=1e-6)


def test_ucc_without_input():
    rep = check_ucc(const(-np.eye(2)), const(np.zeros((2, 1))), 1.0, 3.0, scan_points=3)
    assert rep.alpha0 == 0.0
    assert not rep.passed


def test_zero_steering_trivial_and_scalar():
    grid = TimeGrid.uniform(0.0, 1.0, 0.01)
    u = zero_steering_control(const([[0.0]]), const([[1.0]]), grid, [0.0])
    assert np.array_equal(u.values, np.zeros((len(grid), 1)))
    u = zero_steering_control(const([[0.0]]), const([[1.0]]), grid, [1.0])
    np.testing.assert_allclose(u.values, -1.0, atol=1e-12)


def test_zero_steering_reaches_origin():
    A, B = np.diag([-1.0, -4.0]), np.diag([1.0, 0.25])
    grid = TimeGrid.uniform(0.0, 1.0, 1e-3)
    u = zero_steering_control(const(A), const(B), grid, [1.0, 1.0])

    def rhs(t, x):
        return A @ x + B @ u.at(t)

    cfg = IntegratorConfig("RK45Adaptive", abs_tol=1e-12, rel_tol=1e-12)
    x = integrate_ivp(rhs, [1.0, 1.0], grid, cfg)
    assert np.linalg.norm(x.values[-1]) <= 1e-6


def test_zero_steering_detects_uncontrollable():
    grid = TimeGrid.uniform(0.0, 1.0, 0.01)
    with pytest.raises(NotControllableError):
        zero_steering_control(const(np.zeros((2, 2))), const([[1.0], [0.0]]), grid, [1.0, 1.0])


def test_shifted_constants():
    out = shifted_ucc_constants(1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    assert out["alpha1p"] == pytest.approx((np.e**4 - 1) / 4)
    near = shifted_ucc_constants(1.0, 1.0, 1e-9, 1.0, 0.8, 2.0)
    assert near["alpha0p"] == pytest.approx(0.4)


@settings(max_examples=40, deadline=None)
@given(
    st.floats(0.1, 3.0), st.floats(0.1, 3.0), st.floats(0.0, 3.0), st.floats(0.1, 2.0),
    st.floats(0.1, 2.0), st.floats(0.1, 2.0),
)
def test_shifted_ratio_is_definitional(la, lb, lf, sigma, a0, a1):
    out = shifted_ucc_constants(la, lb, lf, sigma, a0, a1)
    assert out["beta1p"] / out["alpha1p"] == pytest.approx(np.exp(2 * (la + lb * lf) * sigma), rel=1e-12)


def test_dual_constants():
    out = dual_ucc_constants(1.0, 0.0, 0.0, 1.0, 1.0)
    assert out["alpha0t"] == pytest.approx((1 - np.exp(-2.0)) / 2)
    assert out["alpha0t"] == pytest.approx(0.4323, abs=1e-4)
    small = dual_ucc_constants(1e-7, 0.0, 0.0, 1.0, 0.5)
    assert small["alpha0t"] == pytest.approx(0.5, rel=1e-6)
    assert small["alpha1t"] == pytest.approx(0.5, rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 3.0), st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.2, 3.0), st.floats(0.05, 2.0))
def test_dual_lower_below_upper(la, lb, lh, gr, sigma):
    out = dual_ucc_constants(la, lb, lh, gr, sigma)
    assert out["alpha0t"] < out["alpha1t"]
