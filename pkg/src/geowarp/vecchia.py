"""Ordering, parent selection, and the sparse factorization of the approximate precision.

The factorization replaces each full conditional with a regression on a small
parent set. Parent sets mix nearest predecessors in the full coordinate space
with other-column predecessors nearest in depth, so vertically dense columns do
not starve the approximation of horizontal information. All derived quantities
(log-density, precision products, sampling solves) run in one pass over the
ordered points.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .core import ConfigurationError, SiteDataset

__all__ = [
    "VecchiaPlan",
    "VecchiaFactor",
    "PredictionLayout",
    "FactorizationError",
    "build_plan",
    "build_joint_plan",
    "factorize",
    "log_density",
    "precision_apply",
    "precision_quadratic",
    "half_factor_transpose_solve",
]

_CHUNK = 512


class FactorizationError(RuntimeError):
    """A parent Gram system stayed non-positive-definite after jitter."""


class PredictionLayout(enum.Enum):
    COLUMNAR = "columnar"
    GRIDDED = "gridded"


@dataclass(frozen=True)
class VecchiaPlan:
    """Random ordering plus per-point parent sets.

    ``ordering[p]`` is the original index of the point at plan position p;
    ``parents`` holds plan positions (all strictly smaller than their row),
    padded with -1 up to ``m`` columns; ``n_data`` marks how many leading plan
    positions are observation points (equals n for plain data plans).
    """

    ordering: np.ndarray
    parents: np.ndarray
    n_parents: np.ndarray
    m: int
    seed: int
    n_data: int

    @property
    def n(self) -> int:
        return self.ordering.size

    @property
    def n_pred(self) -> int:
        return self.n - self.n_data

    def inverse_ordering(self) -> np.ndarray:
        inv = np.empty(self.n, dtype=np.intp)
        inv[self.ordering] = np.arange(self.n, dtype=np.intp)
        return inv

    def to_dict(self) -> dict:
        return {
            "m": int(self.m),
            "seed": int(self.seed),
            "n_data": int(self.n_data),
            "ordering": self.ordering.tolist(),
            "parents": [
                self.parents[i, : self.n_parents[i]].tolist() for i in range(self.n)
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "VecchiaPlan":
        ordering = np.asarray(payload["ordering"], dtype=np.intp)
        n = ordering.size
        m = int(payload["m"])
        parents = np.full((n, m), -1, dtype=np.intp)
        counts = np.zeros(n, dtype=np.intp)
        for i, row in enumerate(payload["parents"]):
            counts[i] = len(row)
            parents[i, : len(row)] = row
        return cls(ordering, parents, counts, m, int(payload["seed"]), int(payload["n_data"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "VecchiaPlan":
        return cls.from_dict(json.loads(text))


def _check_m(m: int) -> int:
    m = int(m)
    if m < 2:
        raise ConfigurationError("the parent budget m must be an integer >= 2")
    return m


def _stable_topk_merge(dist_a, dist_b, half, total, backfill_order):
    """Merge the two parent rules for one point.

    ``dist_a``/``dist_b`` are index arrays already sorted by their rule
    (invalid entries removed); takes up to ``half`` from each, dedupes, then
    backfills from ``backfill_order`` to reach ``total``.
    """
    chosen = []
    seen = set()
    for cand in dist_a[:half]:
        if cand not in seen:
            seen.add(cand)
            chosen.append(cand)
    for cand in dist_b[:half]:
        if cand not in seen:
            seen.add(cand)
            chosen.append(cand)
    if len(chosen) < total:
        for cand in backfill_order:
            if cand not in seen:
                seen.add(cand)
                chosen.append(cand)
                if len(chosen) == total:
                    break
    return np.sort(np.asarray(chosen[:total], dtype=np.intp))


def _cpt_aware_parents(coords, groups, m, parents, counts, offset=0):
    """Fill parent sets for positions offset..n-1 using the two-rule scheme.

    ``coords``/``groups`` are in plan order (position-indexed); candidates are
    all positions below the row, including any positions before ``offset``.
    """
    n = coords.shape[0]
    half = m // 2
    for start in range(offset, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        rows = np.arange(start, stop)
        diff = coords[rows][:, None, :] - coords[None, :stop, :]
        dist = np.sqrt(np.einsum("rjk,rjk->rj", diff, diff))
        pos = np.arange(stop)[None, :]
        succ = pos >= rows[:, None]
        dist_full = np.where(succ, np.inf, dist)
        ddepth = np.abs(coords[rows][:, None, -1] - coords[None, :stop, -1])
        same_group = groups[None, :stop] == groups[rows][:, None]
        dist_cross = np.where(succ | same_group, np.inf, ddepth)
        order_full = np.argsort(dist_full, axis=1, kind="stable")
        order_cross = np.argsort(dist_cross, axis=1, kind="stable")
        for k, p in enumerate(rows):
            n_pred = p
            total = min(n_pred, m)
            if total == 0:
                counts[p] = 0
                continue
            full_valid = order_full[k][np.isfinite(dist_full[k][order_full[k]])]
            cross_valid = order_cross[k][np.isfinite(dist_cross[k][order_cross[k]])]
            sel = _stable_topk_merge(full_valid, cross_valid, half, total, full_valid)
            counts[p] = sel.size
            parents[p, : sel.size] = sel


def build_plan(dataset: SiteDataset, m: int, seed: int) -> VecchiaPlan:
    """Randomly order the data and pick parents by the two-rule scheme.

    Half the budget goes to nearest predecessors over the full coordinates and
    half to other-sounding predecessors nearest in depth; duplicates are
    backfilled from the nearest pool, so every point gets min(i-1, m) parents.
    Ties break by the stacked point order (sounding id, then depth).
    """
    m = _check_m(m)
    coords = dataset.stacked_coords()
    groups = dataset.sounding_index()
    n = coords.shape[0]
    rng = np.random.default_rng(seed)
    ordering = rng.permutation(n).astype(np.intp)
    coords_p = coords[ordering]
    groups_p = groups[ordering]
    parents = np.full((n, m), -1, dtype=np.intp)
    counts = np.zeros(n, dtype=np.intp)
    _cpt_aware_parents(coords_p, groups_p, m, parents, counts)
    return VecchiaPlan(ordering, parents, counts, m, int(seed), n)


def build_joint_plan(
    dataset: SiteDataset,
    pred_coords: np.ndarray,
    m: int,
    seed: int,
    layout: PredictionLayout = PredictionLayout.COLUMNAR,
) -> VecchiaPlan:
    """Plan over the stacked vector (observations, prediction points).

    Observations come first in a random order with the usual scheme. Each
    prediction point then receives up to m/2 observation parents, taken
    round-robin across soundings by depth proximity (soundings visited in
    order of horizontal distance), and up to m/2 within-prediction parents:
    the two-rule scheme per prediction column for columnar layouts, plain
    nearest predecessors for gridded ones.
    """
    m = _check_m(m)
    pred_coords = np.atleast_2d(np.asarray(pred_coords, dtype=float))
    n_pred = pred_coords.shape[0]
    data_plan = build_plan(dataset, m, seed)
    n_data = data_plan.n
    if n_pred == 0:
        return data_plan
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    pred_order = rng.permutation(n_pred).astype(np.intp)
    ordering = np.concatenate([data_plan.ordering, n_data + pred_order])

    coords = dataset.stacked_coords()
    n_total = n_data + n_pred
    parents = np.full((n_total, m), -1, dtype=np.intp)
    counts = np.zeros(n_total, dtype=np.intp)
    parents[:n_data] = data_plan.parents
    counts[:n_data] = data_plan.n_parents

    half = m // 2
    inv_data = data_plan.inverse_ordering()
    locations = np.stack([s.location for s in dataset.soundings])
    depths_by_sounding = []
    pos_by_sounding = []
    base = 0
    for si, s in enumerate(dataset.soundings):
        idx = np.arange(base, base + s.n)
        depths_by_sounding.append(s.depths)
        pos_by_sounding.append(inv_data[idx])
        base += s.n

    pred_p = pred_coords[pred_order]
    data_parent_sets = _round_robin_data_parents(
        pred_p, locations, depths_by_sounding, pos_by_sounding, half
    )

    # within-prediction parents, in the prediction sub-ordering
    wp_parents = np.full((n_pred, half), -1, dtype=np.intp)
    wp_counts = np.zeros(n_pred, dtype=np.intp)
    if layout is PredictionLayout.COLUMNAR:
        col_groups = _column_groups(pred_coords)[pred_order]
        _cpt_aware_parents(pred_p, col_groups, half, wp_parents, wp_counts)
    else:
        _nearest_parents(pred_p, half, wp_parents, wp_counts)

    for k in range(n_pred):
        p = n_data + k
        data_par = data_parent_sets[k]
        within = n_data + wp_parents[k, : wp_counts[k]]
        sel = np.sort(np.concatenate([data_par, within]))
        counts[p] = sel.size
        parents[p, : sel.size] = sel
    return VecchiaPlan(ordering, parents, counts, m, int(seed), n_data)


def _round_robin_data_parents(pred_p, locations, depths_by_sounding, pos_by_sounding, half):
    """Per prediction point, observation parents spread evenly across soundings."""
    n_s = len(depths_by_sounding)
    out = []
    for k in range(pred_p.shape[0]):
        loc = pred_p[k, :-1]
        h = pred_p[k, -1]
        horiz = np.sqrt(np.sum((locations - loc) ** 2, axis=1))
        sounding_order = np.argsort(horiz, kind="stable")
        per_sounding = []
        for si in sounding_order:
            d = np.abs(depths_by_sounding[si] - h)
            per_sounding.append(pos_by_sounding[si][np.argsort(d, kind="stable")])
        chosen = []
        round_i = 0
        while len(chosen) < half:
            added = False
            for lst in per_sounding:
                if round_i < lst.size:
                    chosen.append(lst[round_i])
                    added = True
                    if len(chosen) == half:
                        break
            if not added:
                break
            round_i += 1
        out.append(np.asarray(chosen, dtype=np.intp))
    return out


def _nearest_parents(coords, m, parents, counts):
    n = coords.shape[0]
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        rows = np.arange(start, stop)
        diff = coords[rows][:, None, :] - coords[None, :stop, :]
        dist = np.sqrt(np.einsum("rjk,rjk->rj", diff, diff))
        succ = np.arange(stop)[None, :] >= rows[:, None]
        dist = np.where(succ, np.inf, dist)
        order = np.argsort(dist, axis=1, kind="stable")
        for k, p in enumerate(rows):
            total = min(p, m)
            sel = order[k][:total]
            counts[p] = total
            parents[p, :total] = np.sort(sel)


def _column_groups(coords: np.ndarray) -> np.ndarray:
    """Group indices for points sharing a horizontal location (1e-9 m tolerance)."""
    horiz = np.round(coords[:, :-1] / 1e-9).astype(np.int64)
    _, groups = np.unique(horiz, axis=0, return_inverse=True)
    return groups.astype(np.intp)


# ---------------------------------------------------------------------------
# Factorization and one-pass quantities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VecchiaFactor:
    """Sparse triangular representation of the approximate precision.

    Row i of the implied unit triangle regresses point i on its parents with
    ``weights[i]`` and leaves conditional variance ``cond_var[i]``; the
    log-determinant of the precision is minus the sum of their logs (asserted
    at construction).
    """

    plan: VecchiaPlan
    weights: np.ndarray
    cond_var: np.ndarray

    @property
    def n(self) -> int:
        return self.plan.n

    @property
    def log_det_precision(self) -> float:
        return -float(np.sum(np.log(self.cond_var)))

    def residuals(self, values: np.ndarray) -> np.ndarray:
        """One-pass conditional residuals r_i = v_i - w_i' v_parents (plan order)."""
        v = np.asarray(values, dtype=float)[self.plan.ordering]
        safe = np.where(self.plan.parents >= 0, self.plan.parents, 0)
        gathered = v[safe] * (self.plan.parents >= 0)
        return v - np.einsum("ij,ij->i", self.weights, gathered)

    def half_factor(self) -> sparse.csr_matrix:
        """M = D^{-1/2}(I - B) in plan order, so that M'M is the precision."""
        n = self.n
        counts = self.plan.n_parents
        total = int(np.sum(counts)) + n
        indptr = np.zeros(n + 1, dtype=np.intp)
        indptr[1:] = np.cumsum(counts + 1)
        indices = np.empty(total, dtype=np.intp)
        data = np.empty(total)
        scale = 1.0 / np.sqrt(self.cond_var)
        diag_pos = indptr[1:] - 1
        indices[diag_pos] = np.arange(n)
        data[diag_pos] = scale
        par_slot = np.ones(total, dtype=bool)
        par_slot[diag_pos] = False
        mask = np.arange(self.plan.m)[None, :] < counts[:, None]
        indices[par_slot] = self.plan.parents[mask]
        data[par_slot] = (-self.weights * scale[:, None])[mask]
        return sparse.csr_matrix((data, indices, indptr), shape=(n, n))


def factorize(plan: VecchiaPlan, gram_oracle, chunk: int = 2048) -> VecchiaFactor:
    """Per-row parent regressions from a batched covariance oracle.

    ``gram_oracle(local_idx)`` must return the (R, K, K) covariance blocks for
    local index sets given in original indices, child first. Rows are grouped
    by parent count and solved with stacked factorizations; a jitter of
    1e-10 times the mean parent variance is added once before declaring a row
    non-positive-definite.
    """
    n = plan.n
    weights = np.zeros((n, plan.m), dtype=float)
    cond_var = np.empty(n, dtype=float)
    counts = plan.n_parents
    order = plan.ordering
    for j in np.unique(counts):
        rows = np.flatnonzero(counts == j)
        if j == 0:
            g = gram_oracle(order[rows][:, None])
            cond_var[rows] = g[:, 0, 0]
            continue
        for start in range(0, rows.size, chunk):
            sel = rows[start : start + chunk]
            local = np.concatenate(
                [order[sel][:, None], order[plan.parents[sel, :j]]], axis=1
            )
            g = gram_oracle(local)
            c = g[:, 1:, 0]
            cpar = g[:, 1:, 1:]
            v = g[:, 0, 0]
            b, d = _solve_rows(cpar, c, v, sel)
            weights[sel, :j] = b
            cond_var[sel] = d
    if np.any(cond_var <= 0):
        bad = int(np.flatnonzero(cond_var <= 0)[0])
        raise FactorizationError(f"non-positive conditional variance at plan row {bad}")
    return VecchiaFactor(plan, weights, cond_var)


def _solve_rows(cpar, c, v, rows):
    try:
        b = np.linalg.solve(cpar, c[..., None])[..., 0]
    except np.linalg.LinAlgError:
        b = None
    if b is not None:
        d = v - np.einsum("ij,ij->i", b, c)
        ok = d > 0
        if ok.all():
            return b, d
    # jitter the failing rows once
    k = cpar.shape[1]
    jitter = 1e-10 * np.mean(cpar[:, np.arange(k), np.arange(k)], axis=1)
    cj = cpar + jitter[:, None, None] * np.eye(k)
    try:
        b = np.linalg.solve(cj, c[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"singular parent system near plan row {rows[0]}") from exc
    d = v - np.einsum("ij,ij->i", b, c)
    if np.any(d <= 0):
        bad = int(rows[np.flatnonzero(d <= 0)[0]])
        raise FactorizationError(f"non-positive conditional variance at plan row {bad}")
    return b, d


def log_density(factor: VecchiaFactor, values: np.ndarray) -> float:
    """Gaussian log-density of ``values`` under the approximate precision."""
    values = np.asarray(values, dtype=float)
    if values.shape != (factor.n,):
        raise ValueError(f"expected vector of length {factor.n}")
    r = factor.residuals(values)
    n = factor.n
    return -0.5 * (
        n * np.log(2.0 * np.pi)
        + float(np.sum(np.log(factor.cond_var)))
        + float(np.sum(r * r / factor.cond_var))
    )


def precision_apply(factor: VecchiaFactor, values: np.ndarray) -> np.ndarray:
    """Product of the approximate precision with a vector (original index order)."""
    values = np.asarray(values, dtype=float)
    squeeze = values.ndim == 1
    v = values[factor.plan.ordering]
    if squeeze:
        v = v[:, None]
    m = factor.half_factor()
    out_plan = m.T @ (m @ v)
    out = np.empty_like(out_plan)
    out[factor.plan.ordering] = out_plan
    return out[:, 0] if squeeze else out


def precision_quadratic(factor: VecchiaFactor, values: np.ndarray) -> float:
    r = factor.residuals(values)
    return float(np.sum(r * r / factor.cond_var))


def half_factor_transpose_solve(factor: VecchiaFactor, noise: np.ndarray) -> np.ndarray:
    """Map white noise to a draw with the factor's precision.

    Solves the unit triangle forward in plan order: x_i = sqrt(d_i) e_i +
    w_i' x_parents, so the output has covariance equal to the precision's
    inverse. Accepts (n,) or (n, draws); returns original index order.
    """
    e = np.asarray(noise, dtype=float)
    squeeze = e.ndim == 1
    if squeeze:
        e = e[:, None]
    if e.shape[0] != factor.n:
        raise ValueError(f"expected {factor.n} rows")
    x = np.empty_like(e)
    sd = np.sqrt(factor.cond_var)
    plan = factor.plan
    for i in range(factor.n):
        c = plan.n_parents[i]
        acc = sd[i] * e[i]
        if c:
            acc = acc + factor.weights[i, :c] @ x[plan.parents[i, :c]]
        x[i] = acc
    out = np.empty_like(x)
    out[plan.ordering] = x
    return out[:, 0] if squeeze else out
