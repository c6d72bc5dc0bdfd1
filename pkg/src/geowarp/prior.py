"""Prior log-densities and their gradients for the hierarchical model.

Univariate densities are normalized; the correlation-factor prior drops its
parameter-free normalizer. Out-of-support parameters yield -inf rather than
raising.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from .core import ModelConfig, ParameterVector

__all__ = [
    "inverse_gamma_logpdf",
    "gamma_logpdf",
    "half_normal_logpdf",
    "inverse_uniform_logpdf",
    "corr_factor_logpdf",
    "random_walk_correlation",
    "exponential_decay_correlation",
    "mean_prior_covariance",
    "mean_prior_precision",
    "log_prior",
    "log_prior_gradient",
]


# ---------------------------------------------------------------------------
# Univariate densities (normalized)
# ---------------------------------------------------------------------------

def inverse_gamma_logpdf(x: float, a: float, b: float) -> float:
    if x <= 0:
        return -math.inf
    return a * math.log(b) - gammaln(a) - (a + 1.0) * math.log(x) - b / x


def gamma_logpdf(x: float, a: float, b: float) -> float:
    """Gamma density with shape a and rate b."""
    if x <= 0:
        return -math.inf
    return a * math.log(b) - gammaln(a) + (a - 1.0) * math.log(x) - b * x


def half_normal_logpdf(x: float, sigma_sq: float) -> float:
    if x < 0:
        return -math.inf
    return 0.5 * math.log(2.0 / (math.pi * sigma_sq)) - x * x / (2.0 * sigma_sq)


def inverse_uniform_logpdf(x: float, lower: float, upper: float) -> float:
    """Density of x when 1/x is uniform on [1/upper, 1/lower]."""
    if not lower <= x <= upper:
        return -math.inf
    return -math.log(1.0 / lower - 1.0 / upper) - 2.0 * math.log(x)


def corr_factor_logpdf(r: np.ndarray, rho: float) -> float:
    """Unnormalized log-density of the correlation factor R.

    Shrinks toward the identity for rho > 1: each diagonal entry R_dd carries
    exponent D - d + 2 rho - 1 (1-based d over D+1 rows).
    """
    k = r.shape[0]
    d = np.arange(1, k + 1)
    exponents = (k - 1) - d + 2.0 * rho - 1.0
    diag = np.diag(r)
    if np.any(diag <= 0):
        return -math.inf
    return float(np.sum(exponents * np.log(diag)))


# ---------------------------------------------------------------------------
# Spline-coefficient priors
# ---------------------------------------------------------------------------

def random_walk_correlation(k: int) -> np.ndarray:
    """C with c_ij = min(i, j) (1-based); a random walk over coefficients."""
    idx = np.arange(1, k + 1)
    return np.minimum.outer(idx, idx).astype(float)


def exponential_decay_correlation(k: int, ell: float) -> np.ndarray:
    idx = np.arange(k)
    return np.exp(-np.abs(np.subtract.outer(idx, idx)) / ell)


def _ar1_quad_and_logdet(zeta: np.ndarray, ell: float) -> tuple:
    """(zeta' C^-1 zeta, log|C|) for the exponential-decay correlation."""
    k = zeta.size
    if k == 0:
        return 0.0, 0.0
    if k == 1:
        return float(zeta[0] ** 2), 0.0
    rho = math.exp(-1.0 / ell)
    one_m = 1.0 - rho * rho
    s_all = float(zeta @ zeta)
    s_int = float(zeta[1:-1] @ zeta[1:-1])
    s_lag = float(zeta[:-1] @ zeta[1:])
    quad = (s_all + rho * rho * s_int - 2.0 * rho * s_lag) / one_m
    logdet = (k - 1) * math.log(one_m)
    return quad, logdet


def _ar1_quad_logdet_grad_ell(zeta: np.ndarray, ell: float) -> tuple:
    """d/d ell of (zeta' C^-1 zeta, log|C|)."""
    k = zeta.size
    if k <= 1:
        return 0.0, 0.0
    rho = math.exp(-1.0 / ell)
    drho = rho / (ell * ell)
    one_m = 1.0 - rho * rho
    s_all = float(zeta @ zeta)
    s_int = float(zeta[1:-1] @ zeta[1:-1])
    s_lag = float(zeta[:-1] @ zeta[1:])
    num = s_all + rho * rho * s_int - 2.0 * rho * s_lag
    dnum = 2.0 * rho * s_int - 2.0 * s_lag
    dquad_drho = (dnum * one_m + 2.0 * rho * num) / (one_m * one_m)
    dlogdet_drho = (k - 1) * (-2.0 * rho / one_m)
    return dquad_drho * drho, dlogdet_drho * drho


def _ar1_precision_apply(zeta: np.ndarray, ell: float) -> np.ndarray:
    """C^-1 zeta for the exponential-decay correlation (tridiagonal form)."""
    k = zeta.size
    if k == 0:
        return zeta
    if k == 1:
        return zeta.copy()
    rho = math.exp(-1.0 / ell)
    one_m = 1.0 - rho * rho
    out = np.empty(k)
    out[0] = zeta[0] - rho * zeta[1]
    out[-1] = zeta[-1] - rho * zeta[-2]
    if k > 2:
        out[1:-1] = (1.0 + rho * rho) * zeta[1:-1] - rho * (zeta[:-2] + zeta[2:])
    return out / one_m


# ---------------------------------------------------------------------------
# Mean-coefficient prior
# ---------------------------------------------------------------------------

def mean_prior_covariance(cfg: ModelConfig, sigma_beta_sq: float, k_beta: int) -> np.ndarray:
    """Block-diagonal prior covariance of the mean coefficients (alpha, beta)."""
    if sigma_beta_sq <= 0:
        raise ValueError("sigma_beta_sq must be positive")
    out = np.zeros((k_beta + 2, k_beta + 2))
    out[0, 0] = out[1, 1] = cfg.hyper.sigma_alpha_sq
    out[2:, 2:] = sigma_beta_sq * random_walk_correlation(k_beta)
    return out


def mean_prior_precision(cfg: ModelConfig, sigma_beta_sq: float, k_beta: int) -> tuple:
    """(precision of (alpha, beta), log|covariance|), using the closed-form
    tridiagonal inverse of the random-walk correlation (which has unit
    determinant)."""
    prec = np.zeros((k_beta + 2, k_beta + 2))
    prec[0, 0] = prec[1, 1] = 1.0 / cfg.hyper.sigma_alpha_sq
    if k_beta:
        inv = np.zeros((k_beta, k_beta))
        idx = np.arange(k_beta)
        inv[idx, idx] = 2.0
        inv[-1, -1] = 1.0
        inv[idx[:-1], idx[:-1] + 1] = -1.0
        inv[idx[:-1] + 1, idx[:-1]] = -1.0
        prec[2:, 2:] = inv / sigma_beta_sq
    logdet_cov = 2.0 * math.log(cfg.hyper.sigma_alpha_sq) + k_beta * math.log(sigma_beta_sq)
    return prec, logdet_cov


# ---------------------------------------------------------------------------
# Joint prior over the parameter vector
# ---------------------------------------------------------------------------

_LOG_2PI = math.log(2.0 * math.pi)


def _free_horizontal_axes(cfg: ModelConfig):
    if not cfg.variant.has_horizontal_warp:
        return []
    if cfg.tie_horizontal_awus:
        return [0]
    return list(range(cfg.dim))


def log_prior(theta: ParameterVector, cfg: ModelConfig) -> float:
    """Sum of all prior log-densities; -inf when any parameter leaves its support."""
    hyper = cfg.hyper
    var = cfg.variant
    total = 0.0

    if theta.sigma_eps_sq <= 0 or theta.sigma_beta_sq <= 0:
        return -math.inf
    total += inverse_gamma_logpdf(theta.sigma_eps_sq, hyper.a_eps, hyper.b_eps)
    total += inverse_gamma_logpdf(theta.sigma_beta_sq, hyper.a_beta, hyper.b_beta)

    # log-variance coefficients
    eta = theta.eta
    total += -0.5 * (_LOG_2PI + math.log(hyper.sigma_eta_sq) + eta * eta / hyper.sigma_eta_sq)
    if not var.constant_variance:
        if theta.ell_zeta <= 0 or theta.sigma_zeta_sq <= 0:
            return -math.inf
        k = theta.k_zeta
        quad, logdet_c = _ar1_quad_and_logdet(theta.zeta, theta.ell_zeta)
        total += -0.5 * (
            k * (_LOG_2PI + math.log(theta.sigma_zeta_sq))
            + logdet_c
            + quad / theta.sigma_zeta_sq
        )
        total += half_normal_logpdf(theta.ell_zeta, hyper.sigma_ell_sq)
        total += inverse_gamma_logpdf(theta.sigma_zeta_sq, hyper.a_zeta, hyper.b_zeta)

    for d in _free_horizontal_axes(cfg):
        lo, hi = hyper.gamma_bounds(d)
        total += inverse_uniform_logpdf(float(theta.gamma[d][0]), lo, hi)
    if var.has_vertical_warp:
        g = theta.gamma[-1]
        if np.any(g <= 0):
            return -math.inf
        if var.linear_vertical:
            total += gamma_logpdf(float(g[0]), hyper.a_gamma_vert, hyper.b_gamma_vert)
        else:
            for gv in g:
                total += gamma_logpdf(float(gv), hyper.a_gamma_vert, hyper.b_gamma_vert)

    if var.has_geometric_warp:
        total += corr_factor_logpdf(theta.corr_factor, hyper.rho_r)

    return float(total)


def log_prior_gradient(theta: ParameterVector, cfg: ModelConfig) -> dict:
    """Gradient of :func:`log_prior` with respect to the free parameters.

    Returns a dict keyed like the unconstrained chart blocks; the correlation
    block holds the gradient with respect to the factor entries (to be chained
    through the chart separately).
    """
    hyper = cfg.hyper
    var = cfg.variant
    grads: dict = {}

    kappa = np.zeros(theta.kappa.size)
    kappa[0] = -theta.eta / hyper.sigma_eta_sq
    if not var.constant_variance and theta.k_zeta:
        kappa[1:] = -_ar1_precision_apply(theta.zeta, theta.ell_zeta) / theta.sigma_zeta_sq
    grads["kappa"] = kappa

    for d in _free_horizontal_axes(cfg):
        grads[f"gamma{d}"] = np.array([-2.0 / float(theta.gamma[d][0])])
    if var.has_vertical_warp:
        g = theta.gamma[-1]
        a, b = hyper.a_gamma_vert, hyper.b_gamma_vert
        if var.linear_vertical:
            grads[f"gamma{cfg.dim}"] = np.array([(a - 1.0) / g[0] - b])
        else:
            grads[f"gamma{cfg.dim}"] = (a - 1.0) / g - b

    if var.has_geometric_warp:
        k = cfg.dim + 1
        d = np.arange(1, k + 1)
        exponents = (k - 1) - d + 2.0 * hyper.rho_r - 1.0
        grad_r = np.zeros((k, k))
        grad_r[np.diag_indices(k)] = exponents / np.diag(theta.corr_factor)
        grads["corr"] = grad_r

    a, b = hyper.a_eps, hyper.b_eps
    grads["sigma_eps_sq"] = np.array(
        [-(a + 1.0) / theta.sigma_eps_sq + b / theta.sigma_eps_sq**2]
    )
    a, b = hyper.a_beta, hyper.b_beta
    grads["sigma_beta_sq"] = np.array(
        [-(a + 1.0) / theta.sigma_beta_sq + b / theta.sigma_beta_sq**2]
    )

    if not var.constant_variance:
        sz = theta.sigma_zeta_sq
        k = theta.k_zeta
        quad, _ = _ar1_quad_and_logdet(theta.zeta, theta.ell_zeta)
        dquad_dell, dlogdet_dell = _ar1_quad_logdet_grad_ell(theta.zeta, theta.ell_zeta)
        a, b = hyper.a_zeta, hyper.b_zeta
        grads["sigma_zeta_sq"] = np.array(
            [-0.5 * (k / sz - quad / sz**2) - (a + 1.0) / sz + b / sz**2]
        )
        grads["ell_zeta"] = np.array(
            [
                -0.5 * (dlogdet_dell + dquad_dell / sz)
                - theta.ell_zeta / hyper.sigma_ell_sq
            ]
        )
    return grads
