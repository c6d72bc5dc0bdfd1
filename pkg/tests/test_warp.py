import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geowarp.core import DomainError, ModelConfig, ParameterVector, Variant
from geowarp.warp import (
    AxialWarping,
    GeometricWarping,
    Warping,
    axial_warp,
    axial_warp_derivative,
    warp_point,
)


def naive_bernstein_sum(gamma, lower, upper, u):
    """Direct polynomial-sum oracle for the axial warp."""
    order = len(gamma)
    lam = np.cumsum(gamma)
    x = (u - lower) / (upper - lower)
    total = 0.0
    for l in range(1, order + 1):
        total += math.comb(order, l) * x**l * (1 - x) ** (order - l) * lam[l - 1]
    return total


def test_equal_increments_is_exactly_linear():
    for order in (1, 2, 5, 20):
        aw = AxialWarping(np.full(order, 0.7), lower=-2.0, upper=6.0)
        u = np.linspace(-2.0, 6.0, 50)
        expected = 0.7 * order * (u + 2.0) / 8.0
        np.testing.assert_allclose(aw.warp(u), expected, atol=1e-12)


def test_endpoints():
    rng = np.random.default_rng(0)
    gamma = rng.gamma(2.0, 1.0, size=8) + 0.01
    aw = AxialWarping(gamma, lower=1.0, upper=3.0)
    assert axial_warp(aw, 1.0) == pytest.approx(0.0, abs=1e-14)
    assert axial_warp(aw, 3.0) == pytest.approx(gamma.sum(), rel=1e-14)


def test_matches_naive_polynomial_oracle():
    rng = np.random.default_rng(42)
    gamma = rng.gamma(1.5, 0.8, size=20) + 1e-3
    aw = AxialWarping(gamma, lower=0.0, upper=41.0)
    for u in rng.uniform(0, 41, 25):
        assert axial_warp(aw, u) == pytest.approx(
            naive_bernstein_sum(gamma, 0.0, 41.0, u), abs=1e-12
        )


@given(
    st.lists(st.floats(min_value=0.01, max_value=5.0), min_size=1, max_size=12),
    st.floats(min_value=0.0, max_value=1.0),
    st.floats(min_value=0.0, max_value=1.0),
)
@settings(max_examples=120, deadline=None)
def test_monotonicity(increments, a, b):
    if abs(a - b) < 1e-9:
        return
    aw = AxialWarping(np.array(increments), lower=0.0, upper=1.0)
    lo, hi = min(a, b), max(a, b)
    assert axial_warp(aw, lo) < axial_warp(aw, hi)


def test_derivative_constant_for_equal_increments():
    aw = AxialWarping(np.full(6, 1.3), lower=0.0, upper=4.0)
    d = axial_warp_derivative(aw, np.linspace(0, 4, 9))
    np.testing.assert_allclose(d, 1.3 * 6 / 4.0, rtol=1e-13)


def test_derivative_matches_central_difference():
    rng = np.random.default_rng(3)
    gamma = rng.gamma(2.0, 0.5, size=10) + 0.01
    aw = AxialWarping(gamma, lower=0.0, upper=10.0)
    h = 1e-6
    for u in rng.uniform(0.1, 9.9, 20):
        fd = (axial_warp(aw, u + h) - axial_warp(aw, u - h)) / (2 * h)
        assert axial_warp_derivative(aw, u) == pytest.approx(fd, rel=1e-6)


def test_derivative_positive_and_peak_near_dominant_increment():
    gamma = np.full(20, 0.05)
    gamma[9] = 5.0  # dominant increment mid-range
    aw = AxialWarping(gamma, lower=0.0, upper=1.0)
    x = np.linspace(0, 1, 401)
    d = aw.derivative(x)
    assert np.all(d > 0)
    # Bernstein term j = 9 of degree 19 peaks at x = 9/19
    assert abs(x[np.argmax(d)] - 9 / 19) < 0.05


def test_domain_error():
    aw = AxialWarping(np.array([1.0]), lower=0.0, upper=1.0)
    with pytest.raises(DomainError):
        axial_warp(aw, 1.5)


def test_increment_tails_are_warp_gradient():
    rng = np.random.default_rng(5)
    gamma = rng.gamma(2.0, 1.0, size=7) + 0.01
    aw = AxialWarping(gamma, lower=0.0, upper=2.0)
    u = np.array([0.3, 1.1, 1.9])
    tails = aw.increment_tails(u)
    eps = 1e-7
    for l in range(7):
        bumped = gamma.copy()
        bumped[l] += eps
        aw2 = AxialWarping(bumped, lower=0.0, upper=2.0)
        fd = (aw2.warp(u) - aw.warp(u)) / eps
        np.testing.assert_allclose(tails[:, l], fd, atol=1e-6)


def _full_theta(cfg, k_zeta, gamma_h=0.5, gamma_v=None, corr=None):
    d = cfg.dim
    gam = []
    for ax in range(d):
        gam.append(np.full(cfg.awu_orders[ax], gamma_h))
    gam.append(np.asarray(gamma_v if gamma_v is not None else np.ones(cfg.awu_orders[-1])))
    if corr is None:
        corr = np.eye(d + 1)
    return ParameterVector(
        kappa=np.zeros(k_zeta + 1),
        gamma=tuple(gam),
        corr_factor=corr,
        sigma_eps_sq=0.1,
        sigma_beta_sq=1.0,
    )


def test_warp_point_identity():
    cfg = ModelConfig(awu_orders=(2, 2, 4), variant=Variant.CV)
    bounds = np.array([[0.0, 10.0], [0.0, 20.0], [0.0, 5.0]])
    # equal increments chosen so each axis maps to itself: slope c*L/(hi-lo) = 1
    gamma_v = np.full(4, 5.0 / 4.0)
    theta = _full_theta(cfg, 0, gamma_h=0.5, gamma_v=gamma_v)
    theta = theta.with_updates(
        gamma=(np.full(2, 10.0 / 2), np.full(2, 20.0 / 2), gamma_v)
    )
    w = Warping(theta, cfg, bounds)
    u = np.array([3.0, 7.5, 2.0])
    np.testing.assert_allclose(warp_point(w, u), u, atol=1e-12)


def test_squared_distance_equals_quadratic_form():
    rng = np.random.default_rng(9)
    cfg = ModelConfig(awu_orders=(2, 2, 6), variant=Variant.CV)
    bounds = np.array([[0.0, 100.0], [0.0, 80.0], [0.0, 40.0]])
    y = rng.normal(size=3)
    from geowarp.core import _corr_cholesky_from_raw

    corr = _corr_cholesky_from_raw(y, 3).T
    theta = _full_theta(cfg, 0, gamma_h=0.4, gamma_v=rng.gamma(2, 0.5, 6) + 0.05, corr=corr)
    w = Warping(theta, cfg, bounds)
    a = np.array([10.0, 20.0, 5.0])
    b = np.array([50.0, 60.0, 30.0])
    ga, gb = w.warp_point(a), w.warp_point(b)
    analytic = np.sum((ga - gb) ** 2)
    ua = w.axial_only(a[None, :])[0]
    ub = w.axial_only(b[None, :])[0]
    quad = (ua - ub) @ (corr.T @ corr) @ (ua - ub)
    assert analytic == pytest.approx(quad, rel=1e-12)


def test_awu_order_does_not_matter():
    # warped distance must not depend on the order axial units are applied in;
    # each unit touches a single coordinate, so composing in any order agrees
    rng = np.random.default_rng(13)
    cfg = ModelConfig(awu_orders=(2, 2, 5), variant=Variant.CV)
    bounds = np.array([[0.0, 10.0], [0.0, 10.0], [0.0, 10.0]])
    theta = _full_theta(cfg, 0, gamma_h=0.7, gamma_v=rng.gamma(2, 1, 5) + 0.1)
    w = Warping(theta, cfg, bounds)
    pts = rng.uniform(0, 10, size=(4, 3))
    axial = w.axial_only(pts)
    manual = pts.copy()
    for d in [2, 0, 1]:  # apply in scrambled order
        manual[:, d] = w.axial[d].warp(manual[:, d])
    np.testing.assert_allclose(axial, manual, atol=0)


def test_nowarp_distance_is_scaled_euclidean():
    cfg = ModelConfig(awu_orders=(2, 2, 8), variant=Variant.NOWARP_CV)
    bounds = np.array([[0.0, 50.0], [0.0, 40.0], [0.0, 20.0]])
    gam = (np.full(2, 0.8), np.full(2, 0.8), np.full(8, 1.1))
    theta = ParameterVector(
        kappa=np.zeros(1),
        gamma=gam,
        corr_factor=np.eye(3),
        sigma_eps_sq=0.1,
        sigma_beta_sq=1.0,
    )
    w = Warping(theta, cfg, bounds)
    a = np.array([3.0, 5.0, 2.0])
    b = np.array([30.0, 35.0, 17.0])
    scales = np.array([0.8 * 2 / 50.0, 0.8 * 2 / 40.0, 1.1 * 8 / 20.0])
    expected = np.sqrt(np.sum((scales * (a - b)) ** 2))
    got = np.linalg.norm(w.warp_point(a) - w.warp_point(b))
    assert got == pytest.approx(expected, rel=1e-12)


def test_geometric_warping_validation():
    with pytest.raises(ValueError):
        GeometricWarping(np.array([[1.0, 0.5], [0.0, 1.0]]))  # columns not unit norm
    r = np.array([[1.0, 0.5], [0.0, math.sqrt(0.75)]])
    g = GeometricWarping(r)
    np.testing.assert_allclose(np.diag(g.correlation), 1.0, atol=1e-15)
