import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geowarp.bspline import (
    BSplineBasis,
    DomainError,
    basis_matrix,
    design_matrix_mean,
    design_matrix_mean_active,
)


def cox_de_boor(t, j, k, x):
    """Naive recursive Cox-de Boor oracle for B_{j,k} on knot vector t."""
    if k == 1:
        # right-closed at the final nonempty interval so the endpoint evaluates
        last = np.max(t[t < t[-1]]) if t[-1] > t[0] else t[0]
        if t[j] <= x < t[j + 1]:
            return 1.0
        if x == t[-1] and t[j] == last and t[j + 1] == t[-1]:
            return 1.0
        return 0.0
    left = 0.0
    if t[j + k - 1] > t[j]:
        left = (x - t[j]) / (t[j + k - 1] - t[j]) * cox_de_boor(t, j, k - 1, x)
    right = 0.0
    if t[j + k] > t[j + 1]:
        right = (t[j + k] - x) / (t[j + k] - t[j + 1]) * cox_de_boor(t, j + 1, k - 1, x)
    return left + right


def oracle_row(basis, x):
    t = basis._deboor_knots()
    return np.array([cox_de_boor(t, j, 4, x) for j in range(basis.k)])


def test_basis_count_matches_knot_rule():
    basis = BSplineBasis(delta=0.1, h_max=41.0)
    assert basis.k == 417
    assert basis.knots[0] == pytest.approx(-0.3)
    assert basis.knots[-1] == pytest.approx(41.3)


def test_basis_count_without_boundary_knots():
    basis = BSplineBasis(delta=1.0, h_max=5.0, boundary_knots=False)
    assert basis.k == 8  # h_max/delta + 3
    t = basis._deboor_knots()
    assert t[0] == 0.0 and t[-1] == 5.0


@given(st.floats(min_value=0.0, max_value=10.0))
@settings(max_examples=80, deadline=None)
def test_partition_of_unity(h):
    basis = BSplineBasis(delta=0.5, h_max=10.0)
    row = basis_matrix(basis, [h])[0]
    assert abs(row.sum() - 1.0) < 1e-12
    assert np.all(row >= -1e-15)


def test_partition_of_unity_clamped():
    basis = BSplineBasis(delta=1.0, h_max=6.0, boundary_knots=False)
    h = np.linspace(0.0, 6.0, 101)
    rows = basis_matrix(basis, h)
    assert np.max(np.abs(rows.sum(axis=1) - 1.0)) < 1e-12


@pytest.mark.parametrize("boundary", [True, False])
def test_matches_cox_de_boor_oracle(boundary):
    rng = np.random.default_rng(7)
    for delta, h_max in [(0.5, 4.0), (1.0, 7.0), (0.25, 2.0)]:
        basis = BSplineBasis(delta=delta, h_max=h_max, boundary_knots=boundary)
        hs = np.concatenate([rng.uniform(0, h_max, 40), [0.0, h_max, delta / 2]])
        rows = basis_matrix(basis, hs)
        for i, h in enumerate(hs):
            np.testing.assert_allclose(rows[i], oracle_row(basis, h), atol=1e-12)


def test_many_random_spacing_pairs_against_oracle():
    rng = np.random.default_rng(11)
    total = 0
    for _ in range(25):
        n_int = int(rng.integers(2, 9))
        delta = float(rng.choice([0.1, 0.2, 0.5, 1.0, 2.0]))
        h_max = n_int * delta
        basis = BSplineBasis(delta=delta, h_max=h_max)
        hs = rng.uniform(0, h_max, 40)
        rows = basis_matrix(basis, hs)
        for i, h in enumerate(hs):
            np.testing.assert_allclose(rows[i], oracle_row(basis, h), atol=1e-12)
            total += 1
    assert total == 1000


def test_local_support():
    basis = BSplineBasis(delta=1.0, h_max=10.0)
    rows = basis_matrix(basis, np.linspace(0, 10, 201))
    anchors = basis.knots
    hs = np.linspace(0, 10, 201)
    for k in range(basis.k):
        far = np.abs(hs - anchors[k]) >= 2.0  # support half-width is 2 spacings
        assert np.all(rows[far, k] == 0.0)


def test_domain_error():
    basis = BSplineBasis(delta=1.0, h_max=5.0)
    with pytest.raises(DomainError):
        basis_matrix(basis, [5.5])
    with pytest.raises(DomainError):
        basis_matrix(basis, [-0.2])


def test_design_matrix_mean_layout():
    basis = BSplineBasis(delta=1.0, h_max=4.0)
    x = design_matrix_mean(basis, [0.0, 1.5, 3.0])
    assert x.shape == (3, basis.k + 2)
    assert np.all(x[:, 0] == 1.0)
    np.testing.assert_allclose(x[:, 1], [0.0, 1.5, 3.0])
    np.testing.assert_allclose(x[0, :2], [1.0, 0.0])
    np.testing.assert_allclose(x[:, 2:], basis_matrix(basis, [0.0, 1.5, 3.0]))


def test_design_matrix_active_agrees_with_dense():
    basis = BSplineBasis(delta=0.5, h_max=3.0)
    h = np.array([0.0, 0.2, 1.7, 3.0])
    dense = design_matrix_mean(basis, h)
    vals, cols = design_matrix_mean_active(basis, h)
    rebuilt = np.zeros_like(dense)
    for i in range(h.size):
        np.add.at(rebuilt[i], cols[i], vals[i])
    np.testing.assert_allclose(rebuilt, dense, atol=0)


def test_design_matrix_rank_is_active_spline_count():
    # The cubic basis reproduces constants (partition of unity) and linears
    # (Greville identity), so the intercept and depth columns add nothing; the
    # rank with n >> K equals the number of spline columns active on [0, h_max].
    basis = BSplineBasis(delta=1.0, h_max=5.0)
    h = np.linspace(0, 5, 400)
    x = design_matrix_mean(basis, h)
    active_splines = np.sum(np.any(x[:, 2:] != 0, axis=0))
    assert active_splines == basis.k - 4
    assert np.linalg.matrix_rank(x) == active_splines
