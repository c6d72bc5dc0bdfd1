"""Injective spatial warping: Bernstein axial units composed with a geometric unit.

Each axial warping unit (AWU) rescales one coordinate through a monotone
Bernstein expansion with positive increments; the geometric unit then applies
the upper-triangular factor of a correlation matrix. Squared distances after
warping equal the quadratic form of the axially-warped offsets under that
correlation matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DomainError, ModelConfig, ParameterVector, Variant

__all__ = [
    "AxialWarping",
    "GeometricWarping",
    "Warping",
    "axial_warp",
    "axial_warp_derivative",
    "warp_point",
]

_EPS = 1e-9


def bernstein_matrix(x: np.ndarray, order: int, include_zero: bool = False) -> np.ndarray:
    """Bernstein basis values at x in [0, 1]; columns l = 1..order (or 0..order)."""
    x = np.asarray(x, dtype=float)
    start = 0 if include_zero else 1
    ls = np.arange(start, order + 1)
    coeffs = np.array([math.comb(order, l) for l in ls], dtype=float)
    xs = x[..., None]
    return coeffs * xs**ls * (1.0 - xs) ** (order - ls)


@dataclass(frozen=True)
class AxialWarping:
    """Monotone rescaling of one coordinate over [lower, upper].

    The increments must be positive; the implied coefficients (their partial
    sums) are then strictly increasing, which is necessary and sufficient for
    monotonicity. The warp is anchored so the lower bound maps to zero.
    """

    increments: np.ndarray
    lower: float
    upper: float

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 1 or inc.size < 1:
            raise ValueError("increments must be a nonempty vector")
        if np.any(inc <= 0):
            raise ValueError("increments must be positive")
        if not self.upper > self.lower:
            raise ValueError("upper bound must exceed lower bound")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def order(self) -> int:
        return self.increments.size

    @property
    def coefficients(self) -> np.ndarray:
        return np.cumsum(self.increments)

    def _normalize(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if np.any(u < self.lower - _EPS) or np.any(u > self.upper + _EPS):
            bad = u[(u < self.lower - _EPS) | (u > self.upper + _EPS)].flat[0]
            raise DomainError(f"coordinate {bad} outside [{self.lower}, {self.upper}]")
        return np.clip((u - self.lower) / (self.upper - self.lower), 0.0, 1.0)

    def warp(self, u) -> np.ndarray:
        x = self._normalize(u)
        return bernstein_matrix(x, self.order) @ self.coefficients

    def derivative(self, u) -> np.ndarray:
        """d warp / d u; strictly positive on the domain."""
        x = self._normalize(u)
        psi = bernstein_matrix(x, self.order - 1, include_zero=True)
        return self.order / (self.upper - self.lower) * (psi @ self.increments)

    def increment_tails(self, u) -> np.ndarray:
        """d warp(u) / d increments, shape (n, order): tail sums of the basis."""
        x = self._normalize(u)
        psi = bernstein_matrix(x, self.order)
        return np.cumsum(psi[..., ::-1], axis=-1)[..., ::-1]


@dataclass(frozen=True)
class GeometricWarping:
    """Linear map by the upper-triangular factor R of a correlation matrix."""

    factor: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.factor, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError("factor must be square")
        if np.any(np.tril(r, -1) != 0):
            raise ValueError("factor must be upper triangular")
        if np.max(np.abs(np.sum(r**2, axis=0) - 1.0)) > 1e-12:
            raise ValueError("columns of the factor must have unit norm")
        if np.any(np.diag(r) <= 0):
            raise ValueError("factor diagonal must be positive")
        r.setflags(write=False)
        object.__setattr__(self, "factor", r)

    @property
    def correlation(self) -> np.ndarray:
        return self.factor.T @ self.factor

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.factor.T


class Warping:
    """The composed site warping for a parameter vector and configuration.

    ``transform`` applies the axial units (absent axes pass through) followed
    by the geometric unit. Distances between transformed points are the warped
    distances entering the deviation covariance; for the vertical-only variant
    only the transformed depth column is meaningful for distance.
    """

    def __init__(self, theta: ParameterVector, cfg: ModelConfig, bounds: np.ndarray):
        """``bounds``: (D+1, 2) array of per-axis domain bounds (depth last)."""
        bounds = np.asarray(bounds, dtype=float)
        if bounds.shape != (cfg.dim + 1, 2):
            raise ValueError("bounds must be (D+1, 2)")
        self.cfg = cfg
        self.dim = cfg.dim
        self.bounds = bounds
        self.axial = []
        for d in range(cfg.dim + 1):
            if theta.gamma[d].size == 0:
                self.axial.append(None)
            else:
                self.axial.append(
                    AxialWarping(theta.gamma[d], float(bounds[d, 0]), float(bounds[d, 1]))
                )
        if cfg.variant.has_geometric_warp:
            self.geometric = GeometricWarping(theta.corr_factor)
        else:
            self.geometric = None

    def axial_only(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dim + 1:
            raise ValueError(f"points must have {self.dim + 1} columns")
        out = np.empty_like(pts)
        for d in range(self.dim + 1):
            aw = self.axial[d]
            out[:, d] = pts[:, d] if aw is None else aw.warp(pts[:, d])
        return out

    def transform(self, points: np.ndarray) -> np.ndarray:
        out = self.axial_only(points)
        if self.geometric is not None:
            out = self.geometric.apply(out)
        return out

    def warp_point(self, u: np.ndarray) -> np.ndarray:
        return self.transform(np.atleast_2d(u))[0]

    def check_in_domain(self, points: np.ndarray) -> None:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        for d in range(self.dim + 1):
            lo, hi = self.bounds[d]
            col = pts[:, d]
            if np.any(col < lo - _EPS) or np.any(col > hi + _EPS):
                raise DomainError(f"axis {d}: coordinates outside [{lo}, {hi}]")


def axial_warp(aw: AxialWarping, u):
    """Warped coordinate; increasing in u, zero at the lower bound."""
    res = aw.warp(u)
    return float(res) if np.isscalar(u) else res


def axial_warp_derivative(aw: AxialWarping, u):
    res = aw.derivative(u)
    return float(res) if np.isscalar(u) else res


def warp_point(warping: Warping, u) -> np.ndarray:
    return warping.warp_point(np.asarray(u, dtype=float))


def domain_bounds(dataset, cfg: ModelConfig, h_max: float | None = None) -> np.ndarray:
    """Per-axis warp domain: the horizontal bounding box and [0, h_max]."""
    hb = dataset.horizontal_bounds().astype(float)
    # guard degenerate extents (e.g. a single sounding or a shared coordinate)
    for d in range(hb.shape[0]):
        if hb[d, 1] - hb[d, 0] < 1e-9:
            hb[d, 0] -= 0.5
            hb[d, 1] += 0.5
    top = np.array([[0.0, float(h_max if h_max is not None else dataset.h_max)]])
    return np.concatenate([hb, top], axis=0)
