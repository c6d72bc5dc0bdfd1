"""Order-4 B-spline bases on uniform depth knots.

Used for both the vertical mean profile and the depth-varying log-variance.
With boundary knots included, one basis function is anchored at each knot of
an extended grid running three spacings past either end of the depth range,
giving K = h_max/delta + 7 functions. Without boundary knots the basis is the
clamped (open-knot) cubic basis on [0, h_max], giving K = h_max/delta + 3.
Evaluation uses the local Cox-de Boor recursion, so each depth activates at
most four basis functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DomainError

__all__ = ["BSplineBasis", "DomainError", "basis_matrix", "design_matrix_mean"]

ORDER = 4  # cubic
_EPS = 1e-9


@dataclass(frozen=True)
class BSplineBasis:
    """Uniform cubic B-spline basis over depths [0, h_max]."""

    delta: float
    h_max: float
    boundary_knots: bool = True

    def __post_init__(self):
        n = round(self.h_max / self.delta)
        if abs(self.h_max / self.delta - n) > 1e-9 or n < 1:
            raise ValueError("h_max must be a positive integer multiple of the knot spacing")

    @property
    def order(self) -> int:
        return ORDER

    @property
    def k(self) -> int:
        n = round(self.h_max / self.delta)
        return n + 7 if self.boundary_knots else n + 3

    @property
    def knots(self) -> np.ndarray:
        """Anchor knots, one per basis function."""
        if self.boundary_knots:
            return -3 * self.delta + self.delta * np.arange(self.k)
        # clamped basis: anchors are the Greville-style knot span
        return self._deboor_knots()[2 : 2 + self.k]

    def _deboor_knots(self) -> np.ndarray:
        n = round(self.h_max / self.delta)
        if self.boundary_knots:
            return self.delta * np.arange(-5, n + 6)
        interior = self.delta * np.arange(n + 1)
        return np.concatenate([np.zeros(3), interior, np.full(3, self.h_max)])

    def active(self, depths) -> tuple:
        """Nonzero basis values at each depth.

        Returns ``(values, cols)``, both shaped (n, 4): row i of the full
        design matrix is zero except at columns ``cols[i]`` where it equals
        ``values[i]``.
        """
        h = np.atleast_1d(np.asarray(depths, dtype=float))
        if h.ndim != 1:
            raise ValueError("depths must be one-dimensional")
        if np.any(h < -_EPS) or np.any(h > self.h_max + _EPS):
            bad = h[(h < -_EPS) | (h > self.h_max + _EPS)][0]
            raise DomainError(f"depth {bad} outside [0, {self.h_max}]")
        h = np.clip(h, 0.0, self.h_max)
        t = self._deboor_knots()
        p = ORDER - 1
        span = np.searchsorted(t, h, side="right") - 1
        span = np.clip(span, p, self.k - 1)
        # local Cox-de Boor: compute the p+1 nonzero values per point
        n = h.size
        values = np.zeros((n, ORDER))
        values[:, 0] = 1.0
        left = np.empty((n, ORDER))
        right = np.empty((n, ORDER))
        for j in range(1, ORDER):
            left[:, j] = h - t[span + 1 - j]
            right[:, j] = t[span + j] - h
            saved = np.zeros(n)
            for r in range(j):
                denom = right[:, r + 1] + left[:, j - r]
                temp = np.where(denom > 0, values[:, r] / np.where(denom > 0, denom, 1.0), 0.0)
                values[:, r] = saved + right[:, r + 1] * temp
                saved = left[:, j - r] * temp
            values[:, j] = saved
        cols = span[:, None] + np.arange(-p, 1)[None, :]
        return values, cols


def basis_matrix(basis: BSplineBasis, depths) -> np.ndarray:
    """Dense (n, K) matrix of basis values at the given depths."""
    values, cols = basis.active(depths)
    out = np.zeros((values.shape[0], basis.k))
    np.put_along_axis(out, cols, values, axis=1)
    return out


def design_matrix_mean(basis: BSplineBasis, depths) -> np.ndarray:
    """Mean-profile design matrix: intercept and depth columns, then the basis."""
    h = np.atleast_1d(np.asarray(depths, dtype=float))
    phi = basis_matrix(basis, h)
    out = np.empty((h.size, basis.k + 2))
    out[:, 0] = 1.0
    out[:, 1] = h
    out[:, 2:] = phi
    return out


def design_matrix_mean_active(basis: BSplineBasis, depths) -> tuple:
    """Fixed-width sparse form of the mean design matrix.

    Returns ``(values, cols)`` of shape (n, 6): the intercept, the depth, and
    the four active spline values with their column indices in the dense
    design matrix.
    """
    h = np.atleast_1d(np.asarray(depths, dtype=float))
    values, cols = basis.active(h)
    v = np.empty((h.size, ORDER + 2))
    c = np.empty((h.size, ORDER + 2), dtype=np.intp)
    v[:, 0] = 1.0
    v[:, 1] = h
    v[:, 2:] = values
    c[:, 0] = 0
    c[:, 1] = 1
    c[:, 2:] = cols + 2
    return v, c
