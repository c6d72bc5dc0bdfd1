"""Predictive distributions and conditional simulation at unsampled locations.

Predictions condition the joint sparse factorization of (observations,
targets): the conditional mean solves the target block of the approximate
precision against the cross-precision applied to the data residual, and joint
samples come from triangular solves of the same block. Measurement-level
predictions add independent noise with the fitted error variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import solve_triangular

from .bspline import BSplineBasis, design_matrix_mean
from .core import MeanCoefficients, ParameterVector
from .cov import CovarianceModel
from .infer import MapResult, McmcResult
from .posterior import PosteriorContext
from .vecchia import PredictionLayout, build_joint_plan, factorize

__all__ = [
    "PredictionResult",
    "predict",
    "predict_measurements",
    "simulate_posterior",
    "grid_coordinates",
]

_DENSE_VARIANCE_CAP = 4000


@dataclass
class PredictionResult:
    """Marginal predictive summaries and optional joint samples.

    ``samples`` has one row per draw; ``kind`` distinguishes the latent
    process from noisy measurements. ``pair_cov`` holds the predictive
    covariance of requested index pairs.
    """

    coords: np.ndarray
    mean: np.ndarray
    marginal_sd: np.ndarray
    samples: np.ndarray | None
    kind: str
    pair_cov: np.ndarray | None = None


def _resolve_layout(coords: np.ndarray, layout):
    if isinstance(layout, PredictionLayout):
        return layout
    if layout not in (None, "auto"):
        return PredictionLayout(layout)
    horiz = np.round(coords[:, :-1] / 1e-9).astype(np.int64)
    n_columns = np.unique(horiz, axis=0).shape[0]
    dense_columns = n_columns <= max(1, coords.shape[0] // 4)
    return PredictionLayout.COLUMNAR if dense_columns else PredictionLayout.GRIDDED


def _triangular_splu(mat: sparse.csr_matrix):
    from scipy.sparse.linalg import splu

    return splu(mat.tocsc(), permc_spec="NATURAL")


def predict(
    ctx: PosteriorContext,
    theta: ParameterVector,
    omega,
    coords: np.ndarray,
    m: int = 100,
    seed: int = 0,
    n_samples: int = 0,
    layout="auto",
    pair_indices=None,
) -> PredictionResult:
    """Predict the latent process at the given coordinates.

    ``omega`` is the mean-coefficient vector (or MeanCoefficients). With
    ``n_samples`` > 0 the marginal sd comes from the joint draws; otherwise it
    is computed exactly from the conditional precision block. ``pair_indices``
    (k, 2) requests predictive covariances of coordinate pairs.
    """
    return _predict_impl(
        ctx, theta, omega, coords, m, seed, n_samples, layout, pair_indices,
        measurement=False,
    )


def predict_measurements(
    ctx: PosteriorContext,
    theta: ParameterVector,
    omega,
    coords: np.ndarray,
    m: int = 100,
    seed: int = 0,
    n_samples: int = 0,
    layout="auto",
    pair_indices=None,
) -> PredictionResult:
    """Predict noisy measurements: the latent prediction plus independent noise."""
    return _predict_impl(
        ctx, theta, omega, coords, m, seed, n_samples, layout, pair_indices,
        measurement=True,
    )


def _predict_impl(
    ctx, theta, omega, coords, m, seed, n_samples, layout, pair_indices, measurement
):
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if isinstance(omega, MeanCoefficients):
        omega = omega.stacked
    omega = np.asarray(omega, dtype=float)
    theta.validate(ctx.cfg)
    n_pred = coords.shape[0]
    if n_pred == 0:
        raise ValueError("no prediction coordinates given")
    model = CovarianceModel(theta, ctx.cfg, ctx.bounds, ctx.h_max)
    model.warping.check_in_domain(coords)

    layout = _resolve_layout(coords, layout)
    plan = build_joint_plan(ctx.dataset, coords, m, seed, layout)
    n_data = plan.n_data
    stacked = np.concatenate([ctx.coords, coords], axis=0)
    nugget_mask = np.concatenate(
        [np.ones(n_data, dtype=bool), np.zeros(n_pred, dtype=bool)]
    )
    prepared = model.prepare_points(stacked, nugget_mask)
    factor = factorize(plan, lambda idx: model.local_grams(prepared, idx))

    basis = BSplineBasis(ctx.cfg.delta_mu, ctx.h_max)
    x_pred = design_matrix_mean(basis, coords[:, -1])
    prior_mean_pred = x_pred @ omega
    resid = ctx.values - ctx.x_csr @ omega

    half = factor.half_factor()
    # cross-precision applied to the residual, then the target-block solve
    vec = np.zeros(plan.n)
    inv = plan.inverse_ordering()
    vec[inv[:n_data]] = resid
    t_full = half.T @ (half @ vec)
    v_pred_plan = t_full[n_data:]
    m_pp = half[n_data:, n_data:].tocsr()
    lu = _triangular_splu(m_pp)
    u = lu.solve(v_pred_plan, trans="T")
    x_sol = lu.solve(u)
    pred_plan_order = plan.ordering[n_data:] - n_data
    mean = prior_mean_pred - _unpermute(x_sol, pred_plan_order)

    samples = None
    if n_samples > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
        noise = rng.standard_normal((n_pred, n_samples))
        draws_plan = lu.solve(noise)
        samples = mean[None, :] + _unpermute(draws_plan, pred_plan_order).T
        marginal_sd = samples.std(axis=0, ddof=1)
    else:
        variances = _conditional_variances(m_pp)
        marginal_sd = np.sqrt(_unpermute(variances, pred_plan_order))

    pair_cov = None
    if pair_indices is not None:
        pair_indices = np.asarray(pair_indices, dtype=np.intp)
        pair_cov = _pair_covariances(m_pp, pred_plan_order, pair_indices)

    kind = "measurement" if measurement else "process"
    if measurement:
        eps = theta.sigma_eps_sq
        if samples is not None:
            rng_eps = np.random.default_rng(np.random.SeedSequence([int(seed), 4]))
            samples = samples + math.sqrt(eps) * rng_eps.standard_normal(samples.shape)
            marginal_sd = samples.std(axis=0, ddof=1)
        else:
            marginal_sd = np.sqrt(marginal_sd**2 + eps)
        if pair_cov is not None:
            pair_cov = pair_cov.copy()
            pair_cov[:, 0, 0] += eps
            pair_cov[:, 1, 1] += eps
    return PredictionResult(coords, mean, marginal_sd, samples, kind, pair_cov)


def _unpermute(arr_plan, pred_plan_order):
    out = np.empty_like(arr_plan)
    out[pred_plan_order] = arr_plan
    return out


def _conditional_variances(m_pp: sparse.csr_matrix) -> np.ndarray:
    """Diagonal of the inverse of M'M for lower-triangular sparse M."""
    p = m_pp.shape[0]
    if p <= _DENSE_VARIANCE_CAP:
        dense = m_pp.toarray()
        inv = solve_triangular(dense, np.eye(p), lower=True, check_finite=False)
        return np.einsum("ij,ij->i", inv, inv)
    lu = _triangular_splu(m_pp)
    out = np.empty(p)
    chunk = 512
    for start in range(0, p, chunk):
        stop = min(start + chunk, p)
        rhs = np.zeros((p, stop - start))
        rhs[np.arange(start, stop), np.arange(stop - start)] = 1.0
        rows = lu.solve(rhs, trans="T")
        out[start:stop] = np.sum(rows * rows, axis=0)
    return out


def _pair_covariances(m_pp, pred_plan_order, pairs) -> np.ndarray:
    """Exact 2x2 predictive covariance blocks for index pairs (input order)."""
    p = m_pp.shape[0]
    inv_order = np.empty(p, dtype=np.intp)
    inv_order[pred_plan_order] = np.arange(p)
    lu = _triangular_splu(m_pp)
    needed = np.unique(pairs.ravel())
    rhs = np.zeros((p, needed.size))
    rhs[inv_order[needed], np.arange(needed.size)] = 1.0
    # columns of the inverse transpose: covariance rows for the needed points
    cols = lu.solve(rhs, trans="T")
    lookup = {int(pt): i for i, pt in enumerate(needed)}
    out = np.empty((pairs.shape[0], 2, 2))
    for r, (i, j) in enumerate(pairs):
        ci = cols[:, lookup[int(i)]]
        cj = cols[:, lookup[int(j)]]
        out[r, 0, 0] = ci @ ci
        out[r, 1, 1] = cj @ cj
        out[r, 0, 1] = out[r, 1, 0] = ci @ cj
    return out


def grid_coordinates(spec: dict, dim: int = 2) -> np.ndarray:
    """Regular prediction grid from {easting: (lo, hi, n), northing: ..., depth: ...}."""
    axes = []
    keys = ["easting", "northing", "depth"] if dim == 2 else ["easting", "depth"]
    for key in keys:
        lo, hi, count = spec[key]
        axes.append(np.linspace(lo, hi, int(count)))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def simulate_posterior(
    ctx: PosteriorContext,
    fit,
    coords: np.ndarray,
    seed: int = 0,
    n_draws: int = 1,
    m: int = 100,
    layout="auto",
    measurement: bool = False,
    max_parameter_draws: int | None = None,
):
    """Joint field simulation at the given coordinates.

    With a MAP fit all draws use the point estimates; with MCMC output, one
    field is drawn per retained parameter sample (optionally a deterministic
    thinned subset capped at ``max_parameter_draws``).
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    predict_fn = predict_measurements if measurement else predict
    if isinstance(fit, MapResult):
        res = predict_fn(
            ctx, fit.theta, fit.omega, coords, m=m, seed=seed,
            n_samples=max(n_draws, 1), layout=layout,
        )
        return res.samples
    if isinstance(fit, McmcResult):
        xs = fit.stacked()
        omegas = fit.omega_draws.reshape(-1, fit.omega_draws.shape[-1])
        keep = xs.shape[0]
        if max_parameter_draws is not None and keep > max_parameter_draws:
            sel = np.linspace(0, keep - 1, max_parameter_draws).astype(int)
        else:
            sel = np.arange(keep)
        fields = np.empty((sel.size, coords.shape[0]))
        for out_i, s in enumerate(sel):
            theta = ctx.chart.decode(xs[s])
            res = predict_fn(
                ctx, theta, omegas[s], coords, m=m,
                seed=int(np.random.SeedSequence([seed, 5, int(s)]).generate_state(1)[0]),
                n_samples=1, layout=layout,
            )
            fields[out_i] = res.samples[0]
        return fields
    raise TypeError("fit must be a MapResult or McmcResult")
