"""Matern correlation, the depth-varying variance, and the deviation covariance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, kv

from .bspline import BSplineBasis, basis_matrix
from .core import Coordinate, ModelConfig, ParameterVector, Variant
from .warp import Warping

__all__ = [
    "matern",
    "matern_derivative",
    "VarianceProfile",
    "CovarianceModel",
    "deviation_covariance",
    "data_covariance",
    "SizeCapError",
]

DENSE_CAP = 4000
SAME_POINT_TOL = 1e-9


class SizeCapError(ValueError):
    """Dense covariance requested for too many points; use the sparse path."""


def matern(nu: float, d) -> np.ndarray:
    """Matern correlation at distance d (closed forms for half-integer nu)."""
    d = np.asarray(d, dtype=float)
    if not np.isfinite(d).all() or not math.isfinite(nu) or nu <= 0:
        raise ValueError("matern requires finite d and nu > 0")
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    t = math.sqrt(2.0 * nu) * d
    if nu == 0.5:
        return np.exp(-t)
    if nu == 1.5:
        return (1.0 + t) * np.exp(-t)
    if nu == 2.5:
        return (1.0 + t + t**2 / 3.0) * np.exp(-t)
    if nu == 3.5:
        return (1.0 + t + 0.4 * t**2 + t**3 / 15.0) * np.exp(-t)
    log_c = (1.0 - nu) * math.log(2.0) - gammaln(nu)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.exp(log_c + nu * np.log(t)) * kv(nu, t)
    return np.where(t > 0, np.nan_to_num(out, nan=0.0), 1.0)


def matern_derivative(nu: float, d) -> np.ndarray:
    """d matern / d distance. Zero at the origin for nu > 1/2."""
    d = np.asarray(d, dtype=float)
    s = math.sqrt(2.0 * nu)
    t = s * d
    if nu == 0.5:
        return -np.exp(-t)
    if nu == 1.5:
        return -s * t * np.exp(-t)
    if nu == 2.5:
        return -s * (t * (1.0 + t) / 3.0) * np.exp(-t)
    if nu == 3.5:
        return -s * t * (0.2 + 0.2 * t + t**2 / 15.0) * np.exp(-t)
    log_c = (1.0 - nu) * math.log(2.0) - gammaln(nu)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = -s * np.exp(log_c + nu * np.log(t)) * kv(nu - 1.0, t)
    limit = -s if nu == 0.5 else 0.0
    return np.where(t > 0, np.nan_to_num(out, nan=0.0), limit)


@dataclass(frozen=True)
class VarianceProfile:
    """Depth-varying deviation variance: log sigma^2(h) = eta + sum phi_k(h) zeta_k."""

    eta: float
    zeta: np.ndarray
    basis: BSplineBasis | None

    def __post_init__(self):
        zeta = np.asarray(self.zeta, dtype=float)
        if zeta.size > 0 and self.basis is None:
            raise ValueError("a basis is required when spline coefficients are present")
        if self.basis is not None and zeta.size != self.basis.k:
            raise ValueError("zeta length must match the basis size")
        zeta.setflags(write=False)
        object.__setattr__(self, "zeta", zeta)

    def log_variance(self, depths) -> np.ndarray:
        h = np.atleast_1d(np.asarray(depths, dtype=float))
        out = np.full(h.shape, self.eta)
        if self.zeta.size:
            out = out + basis_matrix(self.basis, h) @ self.zeta
        return out

    def variance(self, depths) -> np.ndarray:
        return np.exp(self.log_variance(depths))

    def sd(self, depths) -> np.ndarray:
        return np.exp(0.5 * self.log_variance(depths))


class CovarianceModel:
    """Deviation covariance for one parameter vector on one site geometry.

    Bundles the warping, the variance profile, and the variant switches so
    callers can evaluate covariances between arbitrary coordinate arrays
    (rows are points ``(s_1, ..., s_D, h)``).
    """

    def __init__(self, theta: ParameterVector, cfg: ModelConfig, bounds, h_max: float):
        theta.validate(cfg)
        self.cfg = cfg
        self.theta = theta
        self.h_max = float(h_max)
        self.warping = Warping(theta, cfg, bounds)
        if cfg.variant.constant_variance:
            self.profile = VarianceProfile(theta.eta, np.empty(0), None)
        else:
            basis = BSplineBasis(
                cfg.delta_sigma, self.h_max, cfg.include_variance_boundary_knots
            )
            if theta.k_zeta != basis.k:
                raise ValueError(
                    f"kappa has {theta.k_zeta} spline coefficients, basis needs {basis.k}"
                )
            self.profile = VarianceProfile(theta.eta, theta.zeta, basis)

    @property
    def variant(self) -> Variant:
        return self.cfg.variant

    @property
    def nugget(self) -> float:
        return self.theta.sigma_eps_sq

    def prepare(self, coords: np.ndarray) -> dict:
        """Per-point quantities reused across covariance evaluations."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        self.warping.check_in_domain(coords)
        warped = self.warping.transform(coords)
        sd = self.profile.sd(coords[:, -1])
        return {"coords": coords, "warped": warped, "sd": sd}

    def cross(self, a: dict, b: dict) -> np.ndarray:
        """Deviation covariance matrix between two prepared point sets."""
        variant = self.variant
        sd_outer = np.outer(a["sd"], b["sd"])
        if variant is Variant.WHITE_NOISE_CV:
            same = _same_points(a["coords"], b["coords"])
            return sd_outer * same
        if variant is Variant.VERT_CV:
            dv = np.abs(a["warped"][:, -1:] - b["warped"][:, -1:].T)
            same = _same_points(a["coords"][:, :-1], b["coords"][:, :-1])
            return sd_outer * matern(self.cfg.nu, dv) * same
        diff = a["warped"][:, None, :] - b["warped"][None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        return sd_outer * matern(self.cfg.nu, dist)

    def pairwise(self, coords: np.ndarray) -> np.ndarray:
        p = self.prepare(coords)
        return self.cross(p, p)

    def prepare_points(self, coords: np.ndarray, nugget_mask=None) -> "PreparedPoints":
        """Precompute per-point arrays for fast batched local Grams.

        ``nugget_mask`` marks points carrying the measurement-error variance on
        the diagonal (all points by default; prediction points pass False).
        """
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        p = self.prepare(coords)
        n = coords.shape[0]
        if nugget_mask is None:
            nugget = np.full(n, self.theta.sigma_eps_sq)
        else:
            nugget = np.where(np.asarray(nugget_mask, dtype=bool), self.theta.sigma_eps_sq, 0.0)
        return PreparedPoints(coords, p["warped"], p["sd"], nugget, self)

    def local_grams(self, points: "PreparedPoints", idx: np.ndarray) -> np.ndarray:
        """Covariance blocks for batches of local index sets.

        ``idx`` has shape (R, K): row r selects K points; the result (R, K, K)
        holds their pairwise data covariance (deviation plus per-point nugget
        on the diagonal).
        """
        idx = np.asarray(idx, dtype=np.intp)
        variant = self.variant
        sd = points.sd[idx]
        sd_outer = sd[:, :, None] * sd[:, None, :]
        if variant is Variant.WHITE_NOISE_CV:
            same = _same_local(points.coords[idx])
            out = sd_outer * same
        elif variant is Variant.VERT_CV:
            wv = points.warped[idx][:, :, -1]
            dv = np.abs(wv[:, :, None] - wv[:, None, :])
            same = _same_local(points.coords[idx][:, :, :-1])
            out = sd_outer * matern(self.cfg.nu, dv) * same
        else:
            w = points.warped[idx]
            diff = w[:, :, None, :] - w[:, None, :, :]
            dist = np.sqrt(np.einsum("rijk,rijk->rij", diff, diff))
            out = sd_outer * matern(self.cfg.nu, dist)
        k = idx.shape[1]
        out[:, np.arange(k), np.arange(k)] += points.nugget[idx]
        return out


@dataclass
class PreparedPoints:
    """Per-point quantities for a fixed coordinate set under one parameter vector."""

    coords: np.ndarray
    warped: np.ndarray
    sd: np.ndarray
    nugget: np.ndarray
    model: "CovarianceModel"

    @property
    def n(self) -> int:
        return self.coords.shape[0]


def _same_local(a: np.ndarray) -> np.ndarray:
    if a.shape[2] == 0:
        return np.ones(a.shape[:2] + (a.shape[1],))
    diff = a[:, :, None, :] - a[:, None, :, :]
    return (np.max(np.abs(diff), axis=3) < SAME_POINT_TOL).astype(float)


def _same_points(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] == 0:
        return np.ones((a.shape[0], b.shape[0]))
    diff = a[:, None, :] - b[None, :, :]
    return (np.max(np.abs(diff), axis=2) < SAME_POINT_TOL).astype(float)


def deviation_covariance(
    theta: ParameterVector,
    cfg: ModelConfig,
    u1: Coordinate,
    u2: Coordinate,
    *,
    bounds,
    h_max: float,
) -> float:
    """Deviation covariance between two coordinates (symmetric in u1, u2)."""
    model = CovarianceModel(theta, cfg, bounds, h_max)
    a = model.prepare(u1.as_array()[None, :])
    b = model.prepare(u2.as_array()[None, :])
    return float(model.cross(a, b)[0, 0])


def data_covariance(
    theta: ParameterVector,
    cfg: ModelConfig,
    coords: np.ndarray,
    *,
    bounds,
    h_max: float,
    cap: int = DENSE_CAP,
) -> np.ndarray:
    """Dense data covariance (deviation plus nugget); for oracles and small n."""
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    if coords.shape[0] > cap:
        raise SizeCapError(
            f"{coords.shape[0]} points exceeds the dense cap {cap}; "
            "use the sparse approximation path"
        )
    model = CovarianceModel(theta, cfg, bounds, h_max)
    cov = model.pairwise(coords)
    cov[np.diag_indices_from(cov)] += theta.sigma_eps_sq
    return cov
