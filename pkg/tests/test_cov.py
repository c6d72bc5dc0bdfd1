import math

import mpmath as mp
import numpy as np
import pytest

from geowarp.bspline import BSplineBasis
from geowarp.core import Coordinate, ModelConfig, ParameterVector, Variant
from geowarp.cov import (
    CovarianceModel,
    SizeCapError,
    VarianceProfile,
    data_covariance,
    deviation_covariance,
    matern,
    matern_derivative,
)

BOUNDS = np.array([[0.0, 100.0], [0.0, 100.0], [0.0, 10.0]])


def mp_matern(nu, d):
    """Arbitrary-precision Bessel oracle."""
    if d == 0:
        return 1.0
    nu = mp.mpf(nu)
    t = mp.sqrt(2 * nu) * mp.mpf(d)
    return float(2 ** (1 - nu) / mp.gamma(nu) * t**nu * mp.besselk(nu, t))


def test_matern_at_zero_is_one():
    for nu in (0.5, 1.0, 1.5, 2.5, 3.3, 3.5, 7.0):
        assert matern(nu, 0.0) == pytest.approx(1.0, abs=1e-14)


def test_matern_half_is_exponential():
    d = np.linspace(0, 5, 11)
    np.testing.assert_allclose(matern(0.5, d), np.exp(-d), rtol=1e-14)


def test_matern_three_halves_reference_value():
    # (1 + sqrt(3)) exp(-sqrt(3)), frozen from the arbitrary-precision oracle
    assert matern(1.5, 1.0) == pytest.approx(0.483357724596508, abs=1e-12)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5, 3.5, 0.8, 2.0, 4.2])
def test_matern_matches_bessel_oracle(nu):
    for d in [1e-4, 0.03, 0.5, 1.0, 2.7, 8.0]:
        assert matern(nu, d) == pytest.approx(mp_matern(nu, d), rel=1e-10, abs=1e-12)


def test_matern_strictly_decreasing():
    d = np.linspace(0, 6, 200)
    for nu in (0.5, 1.5, 2.5, 3.5, 1.2):
        v = matern(nu, d)
        assert np.all(np.diff(v) < 0)


def test_matern_derivative_matches_fd():
    for nu in (0.5, 1.5, 2.5, 3.5, 1.7):
        for d in (0.05, 0.4, 1.3, 4.0):
            h = 1e-6
            fd = (matern(nu, d + h) - matern(nu, d - h)) / (2 * h)
            assert matern_derivative(nu, d) == pytest.approx(float(fd), rel=2e-5, abs=1e-10)


def test_matern_rejects_bad_input():
    with pytest.raises(ValueError):
        matern(1.5, np.array([np.inf]))
    with pytest.raises(ValueError):
        matern(-1.0, 1.0)
    with pytest.raises(ValueError):
        matern(1.5, -0.5)


def test_variance_profile_positive_and_matches_formula():
    basis = BSplineBasis(delta=2.0, h_max=10.0)
    rng = np.random.default_rng(1)
    zeta = rng.normal(size=basis.k)
    prof = VarianceProfile(eta=-1.0, zeta=zeta, basis=basis)
    h = np.linspace(0, 10, 23)
    v = prof.variance(h)
    assert np.all(v > 0)
    from geowarp.bspline import basis_matrix

    np.testing.assert_allclose(np.log(v), -1.0 + basis_matrix(basis, h) @ zeta, atol=1e-14)


def _theta(cfg, k_zeta=0, eta=0.0, zeta=None, corr=None, seps=0.3):
    gam = []
    for ax in range(cfg.dim):
        if cfg.variant.has_horizontal_warp:
            gam.append(np.full(cfg.awu_orders[ax], 0.5))
        else:
            gam.append(np.empty(0))
    if cfg.variant.has_vertical_warp:
        gam.append(np.full(cfg.awu_orders[-1], 1.0))
    else:
        gam.append(np.empty(0))
    kappa = np.concatenate([[eta], zeta if zeta is not None else np.zeros(k_zeta)])
    return ParameterVector(
        kappa=kappa,
        gamma=tuple(gam),
        corr_factor=corr if corr is not None else np.eye(cfg.dim + 1),
        sigma_eps_sq=seps,
        sigma_beta_sq=1.0,
    )


def test_deviation_covariance_diagonal_is_variance():
    cfg = ModelConfig(delta_sigma=2.0, awu_orders=(2, 2, 4))
    basis_k = cfg.k_zeta(10.0)
    rng = np.random.default_rng(2)
    zeta = 0.3 * rng.normal(size=basis_k)
    theta = _theta(cfg, basis_k, eta=-0.5, zeta=zeta)
    u = Coordinate(np.array([20.0, 30.0]), 4.0)
    got = deviation_covariance(theta, cfg, u, u, bounds=BOUNDS, h_max=10.0)
    model = CovarianceModel(theta, cfg, BOUNDS, 10.0)
    assert got == pytest.approx(float(model.profile.variance(4.0)[0]), rel=1e-14)


def test_stationary_special_case():
    # constant variance + identity-like linear warp reduces to matern of scaled distance
    cfg = ModelConfig(awu_orders=(2, 2, 4), variant=Variant.CV)
    bounds = np.array([[0.0, 2.0], [0.0, 2.0], [0.0, 4.0]])
    theta = ParameterVector(
        kappa=np.array([0.0]),
        gamma=(np.full(2, 1.0), np.full(2, 1.0), np.full(4, 1.0)),
        corr_factor=np.eye(3),
        sigma_eps_sq=0.1,
        sigma_beta_sq=1.0,
    )
    u1 = Coordinate(np.array([0.0, 0.0]), 0.0)
    u2 = Coordinate(np.array([1.0, 1.0]), 2.0)
    got = deviation_covariance(theta, cfg, u1, u2, bounds=bounds, h_max=4.0)
    scaled = np.array([1.0 * 2 / 2.0, 1.0 * 2 / 2.0, 1.0 * 4 / 4.0]) * np.array([1.0, 1.0, 2.0])
    assert got == pytest.approx(float(matern(1.5, np.linalg.norm(scaled))), rel=1e-12)


def test_gram_matrix_psd():
    rng = np.random.default_rng(3)
    cfg = ModelConfig(delta_sigma=2.0, awu_orders=(2, 2, 6))
    kz = cfg.k_zeta(10.0)
    theta = _theta(cfg, kz, eta=-0.3, zeta=0.2 * rng.normal(size=kz))
    coords = np.column_stack(
        [rng.uniform(0, 100, 40), rng.uniform(0, 100, 40), rng.uniform(0, 10, 40)]
    )
    model = CovarianceModel(theta, cfg, BOUNDS, 10.0)
    gram = model.pairwise(coords)
    np.testing.assert_allclose(gram, gram.T, atol=1e-13)
    eig = np.linalg.eigvalsh(gram)
    assert eig.min() >= -1e-10 * np.trace(gram)


def test_data_covariance_small_and_cap():
    cfg = ModelConfig(variant=Variant.CV, awu_orders=(2, 2, 3))
    theta = _theta(cfg, 0, eta=math.log(0.5), seps=0.2)
    coords = np.array([[1.0, 1.0, 2.0]])
    cov = data_covariance(theta, cfg, coords, bounds=BOUNDS, h_max=10.0)
    assert cov[0, 0] == pytest.approx(0.5 + 0.2, rel=1e-14)
    with pytest.raises(SizeCapError):
        data_covariance(theta, cfg, np.zeros((11, 3)), bounds=BOUNDS, h_max=10.0, cap=10)


def test_data_covariance_logdet_matches_eigen_oracle():
    rng = np.random.default_rng(4)
    cfg = ModelConfig(delta_sigma=5.0, awu_orders=(2, 2, 5))
    kz = cfg.k_zeta(10.0)
    theta = _theta(cfg, kz, eta=-0.4, zeta=0.3 * rng.normal(size=kz))
    coords = np.column_stack(
        [rng.uniform(0, 100, 50), rng.uniform(0, 100, 50), rng.uniform(0, 10, 50)]
    )
    cov = data_covariance(theta, cfg, coords, bounds=BOUNDS, h_max=10.0)
    chol = np.linalg.cholesky(cov)
    logdet_chol = 2.0 * np.sum(np.log(np.diag(chol)))
    logdet_eig = float(np.sum(np.log(np.linalg.eigvalsh(cov))))
    assert logdet_chol == pytest.approx(logdet_eig, abs=1e-8)


def test_vertical_only_variant():
    cfg = ModelConfig(awu_orders=(2, 2, 4), variant=Variant.VERT_CV)
    theta = ParameterVector(
        kappa=np.array([math.log(0.8)]),
        gamma=(np.empty(0), np.empty(0), np.full(4, 1.0)),
        corr_factor=np.eye(3),
        sigma_eps_sq=0.1,
        sigma_beta_sq=1.0,
    )
    model = CovarianceModel(theta, cfg, BOUNDS, 10.0)
    same_col = model.pairwise(np.array([[5.0, 5.0, 1.0], [5.0, 5.0, 3.0]]))
    assert same_col[0, 1] > 0
    cross_col = model.pairwise(np.array([[5.0, 5.0, 1.0], [6.0, 5.0, 1.0]]))
    assert cross_col[0, 1] == 0.0
    assert cross_col[0, 0] == pytest.approx(0.8, rel=1e-14)


def test_white_noise_variant():
    cfg = ModelConfig(awu_orders=(2, 2, 4), variant=Variant.WHITE_NOISE_CV)
    theta = ParameterVector(
        kappa=np.array([math.log(0.5)]),
        gamma=(np.empty(0), np.empty(0), np.empty(0)),
        corr_factor=np.eye(3),
        sigma_eps_sq=0.1,
        sigma_beta_sq=1.0,
    )
    model = CovarianceModel(theta, cfg, BOUNDS, 10.0)
    gram = model.pairwise(np.array([[5.0, 5.0, 1.0], [5.0, 5.0, 1.0 + 1e-6], [5.0, 5.0, 1.0]]))
    assert gram[0, 1] == 0.0
    assert gram[0, 2] == pytest.approx(0.5)
    assert gram[0, 0] == pytest.approx(0.5)


def test_stationary_limit_full_equals_nowarpcv():
    # Full variant with linear AWUs, identity R, constant variance must match
    # the stationary NoWarp-CV covariance exactly.
    rng = np.random.default_rng(5)
    coords = np.column_stack(
        [rng.uniform(0, 100, 20), rng.uniform(0, 100, 20), rng.uniform(0, 10, 20)]
    )
    cfg_full = ModelConfig(awu_orders=(2, 2, 6), variant=Variant.CV)
    theta_full = ParameterVector(
        kappa=np.array([-0.2]),
        gamma=(np.full(2, 0.7), np.full(2, 0.9), np.full(6, 1.2)),
        corr_factor=np.eye(3),
        sigma_eps_sq=0.1,
        sigma_beta_sq=1.0,
    )
    cfg_nw = ModelConfig(awu_orders=(2, 2, 6), variant=Variant.NOWARP_CV)
    theta_nw = theta_full
    a = CovarianceModel(theta_full, cfg_full, BOUNDS, 10.0).pairwise(coords)
    b = CovarianceModel(theta_nw, cfg_nw, BOUNDS, 10.0).pairwise(coords)
    np.testing.assert_allclose(a, b, atol=1e-12)
