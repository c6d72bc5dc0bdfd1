import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geowarp.core import (
    ConfigurationError,
    Coordinate,
    Hyperparameters,
    ModelConfig,
    ParameterChart,
    ParameterVector,
    SiteDataset,
    Sounding,
    Variant,
    parameter_count,
    round_up_depth,
    unconstrained_decode,
    unconstrained_encode,
)


def random_theta(cfg, k_zeta, rng):
    chart = ParameterChart(cfg, k_zeta)
    return chart.decode(rng.normal(scale=0.8, size=chart.dim))


def flatten_free(theta, cfg):
    """Free coordinates of theta in chart block order (for Jacobian oracles)."""
    parts = [theta.kappa]
    counts = cfg.free_increment_counts()
    for d, n in enumerate(counts):
        if n == 0:
            continue
        g = theta.gamma[d]
        parts.append(g[:1] if n == 1 else g)
    if cfg.variant.has_geometric_warp:
        k = cfg.dim + 1
        vals = []
        for i in range(1, k):
            for j in range(i):
                vals.append(theta.corr_factor[j, i])  # L[i, j] = R[j, i]
        parts.append(np.array(vals))
    parts.append(np.array([theta.sigma_eps_sq, theta.sigma_beta_sq]))
    if not cfg.variant.constant_variance:
        parts.append(np.array([theta.ell_zeta, theta.sigma_zeta_sq]))
    return np.concatenate(parts)


ALL_VARIANTS = list(Variant)


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_round_trip_all_variants(variant):
    cfg = ModelConfig(awu_orders=(2, 2, 5), variant=variant, delta_sigma=2.0)
    k_zeta = 0 if variant.constant_variance else 12
    rng = np.random.default_rng(0)
    chart = ParameterChart(cfg, k_zeta)
    for _ in range(30):
        x = rng.normal(scale=1.2, size=chart.dim)
        theta = chart.decode(x)
        theta.validate(cfg)
        x2 = chart.encode(theta)
        np.testing.assert_allclose(x2, x, atol=1e-10)
        theta2 = chart.decode(x2)
        np.testing.assert_allclose(
            flatten_free(theta2, cfg), flatten_free(theta, cfg), atol=1e-10
        )


def test_round_trip_100_random_draws_production_config():
    cfg = ModelConfig()
    rng = np.random.default_rng(1)
    chart = ParameterChart(cfg, 48)
    for _ in range(100):
        theta = chart.decode(rng.normal(scale=1.0, size=chart.dim))
        x = chart.encode(theta)
        theta2 = chart.decode(x)
        np.testing.assert_allclose(
            flatten_free(theta2, cfg), flatten_free(theta, cfg), rtol=0, atol=1e-10
        )


def test_round_trip_tied_horizontal():
    cfg = ModelConfig(awu_orders=(2, 2, 4), tie_horizontal_awus=True, delta_sigma=5.0)
    rng = np.random.default_rng(2)
    chart = ParameterChart(cfg, 7)
    theta = chart.decode(rng.normal(size=chart.dim))
    assert np.array_equal(theta.gamma[0], theta.gamma[1])
    np.testing.assert_allclose(chart.encode(theta), chart.encode(chart.decode(chart.encode(theta))))


def test_unit_nugget_encodes_to_zero():
    cfg = ModelConfig(awu_orders=(2, 2, 3), variant=Variant.CV)
    chart = ParameterChart(cfg, 0)
    theta = chart.decode(np.zeros(chart.dim))
    theta = theta.with_updates(sigma_eps_sq=1.0)
    x = chart.encode(theta)
    assert x[chart.slices["sigma_eps_sq"]][0] == 0.0


def test_identity_corr_factor_encodes_to_zero():
    cfg = ModelConfig(awu_orders=(2, 2, 3), variant=Variant.CV)
    chart = ParameterChart(cfg, 0)
    theta = chart.decode(np.zeros(chart.dim)).with_updates(corr_factor=np.eye(3))
    x = chart.encode(theta)
    np.testing.assert_allclose(x[chart.slices["corr"]], 0.0, atol=1e-14)


def test_module_level_encode_decode():
    cfg = ModelConfig(awu_orders=(2, 2, 4), delta_sigma=2.0)
    rng = np.random.default_rng(3)
    theta = random_theta(cfg, 9, rng)
    x = unconstrained_encode(theta, cfg)
    theta2 = unconstrained_decode(x, cfg)
    np.testing.assert_allclose(flatten_free(theta2, cfg), flatten_free(theta, cfg), atol=1e-10)


def test_encode_rejects_mismatched_dims():
    cfg = ModelConfig(awu_orders=(2, 2, 4))
    rng = np.random.default_rng(4)
    theta = random_theta(cfg, 9, rng)
    with pytest.raises(ConfigurationError):
        ParameterChart(cfg, 10).encode(theta)


@pytest.mark.parametrize("variant", ALL_VARIANTS)
def test_log_jacobian_matches_numerical_determinant(variant):
    cfg = ModelConfig(awu_orders=(2, 2, 4), variant=variant, delta_sigma=5.0)
    k_zeta = 0 if variant.constant_variance else 5
    chart = ParameterChart(cfg, k_zeta)
    rng = np.random.default_rng(5)
    x0 = rng.normal(scale=0.6, size=chart.dim)
    eps = 1e-6
    jac = np.empty((chart.dim, chart.dim))
    for j in range(chart.dim):
        up = x0.copy()
        up[j] += eps
        dn = x0.copy()
        dn[j] -= eps
        jac[:, j] = (
            flatten_free(chart.decode(up), cfg) - flatten_free(chart.decode(dn), cfg)
        ) / (2 * eps)
    sign, logdet = np.linalg.slogdet(jac)
    assert sign == 1.0
    assert chart.log_jacobian(x0) == pytest.approx(logdet, abs=1e-5)


def test_log_jacobian_gradient_matches_fd():
    cfg = ModelConfig(awu_orders=(2, 2, 4), delta_sigma=5.0)
    chart = ParameterChart(cfg, 5)
    rng = np.random.default_rng(6)
    x0 = rng.normal(scale=0.7, size=chart.dim)
    g = chart.log_jacobian_gradient(x0)
    eps = 1e-6
    for j in range(chart.dim):
        up = x0.copy()
        up[j] += eps
        dn = x0.copy()
        dn[j] -= eps
        fd = (chart.log_jacobian(up) - chart.log_jacobian(dn)) / (2 * eps)
        assert g[j] == pytest.approx(fd, abs=2e-6)


def test_corr_factor_jacobian_matches_fd():
    cfg = ModelConfig(awu_orders=(2, 2, 4), variant=Variant.CV)
    chart = ParameterChart(cfg, 0)
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=chart.dim)
    jac = chart.corr_factor_jacobian(x0)
    eps = 1e-6
    sl = chart.slices["corr"]
    for j in range(jac.shape[0]):
        up = x0.copy()
        up[sl.start + j] += eps
        dn = x0.copy()
        dn[sl.start + j] -= eps
        fd = (chart.decode(up).corr_factor - chart.decode(dn).corr_factor) / (2 * eps)
        np.testing.assert_allclose(jac[j], fd, atol=1e-8)


def test_parameter_count_paper_example():
    cfg = ModelConfig(awu_orders=(2, 2, 20))
    assert parameter_count(cfg, k_zeta=48) == 86


def test_parameter_count_variant_table():
    cfg = ModelConfig(awu_orders=(2, 20), variant=Variant.NOWARP_CV)
    # retained blocks by hand: two linear axes (2) + scalar block (11 - 2)
    assert parameter_count(cfg, k_zeta=0) == 11
    cfg_tie = ModelConfig(awu_orders=(2, 2, 20), tie_horizontal_awus=True)
    assert parameter_count(cfg_tie, k_zeta=48) == 86 - 2
    cfg_wn = ModelConfig(awu_orders=(2, 2, 20), variant=Variant.WHITE_NOISE_CV)
    assert parameter_count(cfg_wn, k_zeta=0) == 9


def test_degenerate_dimension_rejected():
    with pytest.raises(ConfigurationError):
        ModelConfig(awu_orders=(20,))


def test_round_up_depth():
    cfg = ModelConfig(delta_mu=0.1, delta_sigma=1.0)
    assert round_up_depth(40.3, cfg) == 41.0
    assert round_up_depth(41.0, cfg) == 41.0
    cfg2 = ModelConfig(delta_mu=0.4, delta_sigma=0.6)
    assert round_up_depth(1.0, cfg2) == pytest.approx(1.2)


def test_validate_catches_bad_vectors():
    cfg = ModelConfig(awu_orders=(2, 2, 4), delta_sigma=5.0)
    rng = np.random.default_rng(8)
    theta = random_theta(cfg, 5, rng)
    with pytest.raises(ConfigurationError):
        theta.with_updates(sigma_eps_sq=-1.0).validate(cfg)
    with pytest.raises(ConfigurationError):
        bad_corr = np.eye(3)
        bad_corr[0, 1] = 0.5  # columns no longer unit norm
        theta.with_updates(corr_factor=bad_corr).validate(cfg)
    with pytest.raises(ConfigurationError):
        theta.with_updates(gamma=(np.full(2, 3.0),) + theta.gamma[1:]).validate(cfg)


def test_sounding_and_dataset_invariants():
    with pytest.raises(ValueError):
        Sounding("a", [0.0, 0.0], [1.0, 1.0], [0.1, 0.2])  # non-increasing depths
    s1 = Sounding("a", [0.0, 0.0], [0.5, 1.0], [0.1, 0.2])
    s2 = Sounding("b", [10.0, 5.0], [0.5, 1.5], [0.0, 0.3])
    ds = SiteDataset((s1, s2), h_max=2.0, dim=2)
    assert ds.n_points == 4
    coords = ds.stacked_coords()
    assert coords.shape == (4, 3)
    np.testing.assert_allclose(coords[2], [10.0, 5.0, 0.5])
    np.testing.assert_allclose(ds.horizontal_bounds(), [[0.0, 10.0], [0.0, 5.0]])
    with pytest.raises(ValueError):
        SiteDataset((s1, s1), h_max=2.0, dim=2)  # duplicate ids


def test_coordinate_validation():
    c = Coordinate(np.array([1.0, 2.0]), 3.0)
    np.testing.assert_allclose(c.as_array(), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        Coordinate(np.array([1.0, 2.0]), -0.5)


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_round_trip_property(seed):
    cfg = ModelConfig(awu_orders=(2, 2, 3), delta_sigma=5.0)
    rng = np.random.default_rng(seed)
    chart = ParameterChart(cfg, 4)
    x = rng.normal(scale=1.5, size=chart.dim)
    theta = chart.decode(x)
    np.testing.assert_allclose(chart.encode(theta), x, atol=1e-9)
