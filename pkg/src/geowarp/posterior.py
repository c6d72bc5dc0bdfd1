"""The coefficient-marginalized approximate log-likelihood and log-posterior.

The mean coefficients are integrated out analytically: the marginal Gaussian
log-density is evaluated with the matrix-determinant lemma and the
Sherman-Morrison-Woodbury identity, with the big inverse replaced by the
sparse approximate precision. Gradients are accumulated analytically in
reverse through the one-pass conditional recursion; a finite-difference
fallback is available for auditing.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve

from .bspline import BSplineBasis, design_matrix_mean_active
from .core import ModelConfig, ParameterChart, ParameterVector, SiteDataset, Variant, round_up_depth
from .cov import matern, matern_derivative
from .prior import log_prior, log_prior_gradient, mean_prior_precision
from .vecchia import VecchiaPlan, build_plan
from .warp import bernstein_matrix, domain_bounds

__all__ = [
    "PosteriorContext",
    "marginal_log_likelihood",
    "log_posterior",
    "log_posterior_gradient",
    "mean_coefficients_full_conditional",
]

_DIST_FLOOR = 1e-13


def _matern_with_slope(nu: float, d: np.ndarray, want_slope: bool):
    """(correlation, correlation'(d)/d) sharing one exponential evaluation.

    The slope ratio is smooth at the origin for nu >= 3/2; rougher smoothness
    falls back to the guarded generic forms.
    """
    if nu == 1.5:
        t = math.sqrt(3.0) * d
        e = np.exp(-t)
        corr = (1.0 + t) * e
        return corr, (-3.0 * e if want_slope else None)
    if nu == 2.5:
        t = math.sqrt(5.0) * d
        e = np.exp(-t)
        corr = (1.0 + t + t * t / 3.0) * e
        return corr, (-(5.0 / 3.0) * (1.0 + t) * e if want_slope else None)
    if nu == 3.5:
        t = math.sqrt(7.0) * d
        e = np.exp(-t)
        corr = (1.0 + t + 0.4 * t * t + t**3 / 15.0) * e
        return corr, (-7.0 * (0.2 + 0.2 * t + t * t / 15.0) * e if want_slope else None)
    corr = matern(nu, d)
    if not want_slope:
        return corr, None
    safe = np.maximum(d, _DIST_FLOOR)
    slope = np.where(d > _DIST_FLOOR, matern_derivative(nu, d) / safe, 0.0)
    return corr, slope


class PosteriorContext:
    """Everything fixed across likelihood evaluations for one dataset and config."""

    def __init__(
        self,
        dataset: SiteDataset,
        cfg: ModelConfig,
        m: int = 50,
        seed: int = 0,
        plan: VecchiaPlan | None = None,
        chunk: int = 1024,
        bounds: np.ndarray | None = None,
    ):
        """``bounds`` overrides the warp domain, e.g. with site-level extents
        when fitting a fold whose training soundings span a smaller box."""
        self.dataset = dataset
        self.cfg = cfg
        self.h_max = round_up_depth(dataset.h_max, cfg)
        if bounds is None:
            self.bounds = domain_bounds(dataset, cfg, self.h_max)
        else:
            self.bounds = np.asarray(bounds, dtype=float)
            if self.bounds.shape != (cfg.dim + 1, 2):
                raise ValueError("bounds must be (D+1, 2)")
        self.coords = dataset.stacked_coords()
        self.values = dataset.stacked_values()
        self.groups = dataset.sounding_index()
        self.n = self.coords.shape[0]
        self.plan = plan if plan is not None else build_plan(dataset, m, seed)
        self.chunk = int(chunk)

        mean_basis = BSplineBasis(cfg.delta_mu, self.h_max)
        self.k_beta = mean_basis.k
        depths = self.coords[:, -1]
        self.x_values, self.x_cols = design_matrix_mean_active(mean_basis, depths)
        rows = np.repeat(np.arange(self.n), self.x_values.shape[1])
        self.x_csr = sparse.csr_matrix(
            (self.x_values.ravel(), (rows, self.x_cols.ravel())),
            shape=(self.n, self.k_beta + 2),
        )
        self.k_zeta = cfg.k_zeta(self.h_max)
        if self.k_zeta:
            var_basis = BSplineBasis(
                cfg.delta_sigma, self.h_max, cfg.include_variance_boundary_knots
            )
            vv, vc = var_basis.active(depths)
            vrows = np.repeat(np.arange(self.n), vv.shape[1])
            self.phi_csr = sparse.csr_matrix(
                (vv.ravel(), (vrows, vc.ravel())), shape=(self.n, self.k_zeta)
            )
        else:
            self.phi_csr = sparse.csr_matrix((self.n, 0))

        # Bernstein increment tails per axis: warp(u) = tails @ increments
        self.tails = []
        for d in range(cfg.dim + 1):
            lo, hi = self.bounds[d]
            x = np.clip((self.coords[:, d] - lo) / (hi - lo), 0.0, 1.0)
            psi = bernstein_matrix(x, cfg.awu_orders[d])
            self.tails.append(np.cumsum(psi[:, ::-1], axis=1)[:, ::-1])
        self.chart = ParameterChart(cfg, self.k_zeta)

    # -- per-evaluation point quantities ------------------------------------

    def _point_state(self, theta: ParameterVector) -> dict:
        cfg = self.cfg
        axial = self.coords.copy()
        for d in range(cfg.dim + 1):
            if theta.gamma[d].size:
                axial[:, d] = self.tails[d] @ theta.gamma[d]
        logvar = np.full(self.n, theta.eta)
        if self.k_zeta:
            logvar = logvar + self.phi_csr @ theta.zeta
        sd = np.exp(0.5 * logvar)
        state = {"axial": axial, "sd": sd, "theta": theta}
        if cfg.variant.has_geometric_warp:
            state["corr"] = theta.corr_factor.T @ theta.corr_factor
        else:
            state["corr"] = np.eye(cfg.dim + 1)
        return state

    def _local_kernel(self, state, idx, want_grad):
        """Local covariance blocks (child-first index sets) plus gradient pieces.

        Returns (gram, dev, vgrad) where dev is the deviation part (no nugget)
        and vgrad is the distance-direction weight matern'(d)/d * sd_outer
        (zero off the variant's support), or None without gradients.
        """
        cfg = self.cfg
        theta = state["theta"]
        sd = state["sd"][idx]
        sdo = sd[:, :, None] * sd[:, None, :]
        variant = cfg.variant
        if variant is Variant.WHITE_NOISE_CV:
            same = self._same_local(idx, horizontal_only=False)
            dev = sdo * same
            vgrad = np.zeros_like(dev) if want_grad else None
        elif variant is Variant.VERT_CV:
            uv = state["axial"][idx][:, :, -1]
            dist = np.abs(uv[:, :, None] - uv[:, None, :])
            same = self._same_local(idx, horizontal_only=True)
            corr, slope = _matern_with_slope(cfg.nu, dist, want_grad)
            dev = sdo * corr * same
            vgrad = sdo * same * slope if want_grad else None
        else:
            w = state["axial"][idx] @ state["corr_factor_t"]
            sq = np.einsum("rik,rik->ri", w, w)
            cross = w @ w.transpose(0, 2, 1)
            d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * cross
            dist = np.sqrt(np.maximum(d2, 0.0, out=d2), out=d2)
            corr, slope = _matern_with_slope(cfg.nu, dist, want_grad)
            dev = sdo * corr
            vgrad = sdo * slope if want_grad else None
        gram = dev.copy()
        k = idx.shape[1]
        gram[:, np.arange(k), np.arange(k)] += theta.sigma_eps_sq
        return gram, dev, vgrad

    def _same_local(self, idx, horizontal_only):
        cols = self.coords[:, :-1] if horizontal_only else self.coords
        local = cols[idx]
        diff = local[:, :, None, :] - local[:, None, :, :]
        return (np.max(np.abs(diff), axis=3) < 1e-9).astype(float)

    # -- main evaluation ------------------------------------------------------

    def evaluate(self, theta: ParameterVector, want_grad=False, want_extras=False) -> dict:
        """Marginal log-likelihood, optionally with block gradients and the
        quantities of the mean-coefficient full conditional."""
        cfg = self.cfg
        theta.validate(cfg)
        if theta.k_zeta != self.k_zeta:
            raise ValueError(f"kappa needs {self.k_zeta} spline coefficients")
        state = self._point_state(theta)
        if cfg.variant.has_geometric_warp:
            state["corr_factor_t"] = theta.corr_factor.T
        else:
            state["corr_factor_t"] = np.eye(cfg.dim + 1)
        plan = self.plan
        n = self.n
        order = plan.ordering
        counts = plan.n_parents

        weights = np.zeros((n, plan.m))
        cond_var = np.empty(n)
        group_rows = [(int(j), np.flatnonzero(counts == j)) for j in np.unique(counts)]
        for j, rows in group_rows:
            for start in range(0, rows.size, self.chunk):
                sel = rows[start : start + self.chunk]
                idx = self._local_index(sel, j)
                gram, _, _ = self._local_kernel(state, idx, want_grad=False)
                if j == 0:
                    cond_var[sel] = gram[:, 0, 0]
                    continue
                c = gram[:, 1:, 0]
                cpar = gram[:, 1:, 1:]
                b = np.linalg.solve(cpar, c[..., None])[..., 0]
                d = gram[:, 0, 0] - np.einsum("ij,ij->i", b, c)
                bad = d <= 0
                if bad.any():
                    jit = 1e-10 * np.mean(
                        cpar[bad][:, np.arange(j), np.arange(j)], axis=1
                    )
                    cj = cpar[bad] + jit[:, None, None] * np.eye(j)
                    b[bad] = np.linalg.solve(cj, c[bad][..., None])[..., 0]
                    d[bad] = gram[bad, 0, 0] - np.einsum("ij,ij->i", b[bad], c[bad])
                    if np.any(d[bad] <= 0):
                        raise FloatingPointError(
                            f"non-positive conditional variance at theta={theta}"
                        )
                weights[sel, :j] = b
                cond_var[sel] = d

        inv_sqrt_d = 1.0 / np.sqrt(cond_var)
        m_csr = self._half_factor(weights, cond_var)
        z_plan = self.values[order]
        sz = m_csr @ z_plan
        x_plan = self.x_csr[order]
        sx = m_csr @ x_plan
        prior_prec, logdet_sigma_omega = mean_prior_precision(
            cfg, theta.sigma_beta_sq, self.k_beta
        )
        o_mat = prior_prec + np.asarray((sx.T @ sx).todense())
        w_vec = sx.T @ sz
        try:
            o_chol = cho_factor(o_mat, lower=True)
        except np.linalg.LinAlgError as exc:
            raise FloatingPointError("coefficient information matrix not PD") from exc
        a_vec = cho_solve(o_chol, w_vec)
        logdet_o = 2.0 * float(np.sum(np.log(np.diag(o_chol[0]))))
        logdet_sigma_z = float(np.sum(np.log(cond_var)))
        quad = float(sz @ sz) - float(w_vec @ a_vec)
        big_f = logdet_o + logdet_sigma_omega + logdet_sigma_z + quad
        mll = -0.5 * (n * math.log(2.0 * math.pi) + big_f)

        out = {"mll": mll}
        if want_extras:
            out["o_chol"] = o_chol
            out["w_vec"] = w_vec
            out["omega_mean"] = a_vec
        if want_grad:
            out["grads"] = self._gradient_pass(
                state, weights, cond_var, inv_sqrt_d, sz, sx, o_chol, a_vec,
                group_rows,
            )
        return out

    def _local_index(self, rows, j):
        order = self.plan.ordering
        if j == 0:
            return order[rows][:, None]
        return np.concatenate(
            [order[rows][:, None], order[self.plan.parents[rows, :j]]], axis=1
        )

    def _half_factor(self, weights, cond_var) -> sparse.csr_matrix:
        plan = self.plan
        n = self.n
        counts = plan.n_parents
        total = int(np.sum(counts)) + n
        indptr = np.zeros(n + 1, dtype=np.intp)
        indptr[1:] = np.cumsum(counts + 1)
        indices = np.empty(total, dtype=np.intp)
        data = np.empty(total)
        scale = 1.0 / np.sqrt(cond_var)
        diag_pos = indptr[1:] - 1
        indices[diag_pos] = np.arange(n)
        data[diag_pos] = scale
        slot = np.ones(total, dtype=bool)
        slot[diag_pos] = False
        mask = np.arange(plan.m)[None, :] < counts[:, None]
        indices[slot] = plan.parents[mask]
        data[slot] = (-weights * scale[:, None])[mask]
        return sparse.csr_matrix((data, indices, indptr), shape=(n, n))

    # -- reverse-mode gradient -----------------------------------------------

    def _gradient_pass(
        self, state, weights, cond_var, inv_sqrt_d, sz, sx, o_chol, a_vec, group_rows
    ) -> dict:
        cfg = self.cfg
        theta = state["theta"]
        n = self.n
        plan = self.plan
        order = plan.ordering
        k_x = self.k_beta + 2

        o_inv = cho_solve(o_chol, np.eye(k_x))
        g_mat = o_inv + np.outer(a_vec, a_vec)
        sxg = sx @ g_mat  # dense (n, k_x)
        rowdot = np.asarray(sx.multiply(sxg).sum(axis=1)).ravel()
        sxa = sx @ a_vec
        xa_all = self.x_csr @ a_vec  # original index order
        z_all = self.values

        a_row = (1.0 - sz * sz - rowdot + 2.0 * sxa * sz) / cond_var

        rho_acc = np.zeros(n)
        u_acc = np.zeros((n, cfg.dim + 1))
        w3 = np.zeros((cfg.dim + 1, cfg.dim + 1))
        nug_grad = 0.0

        for j, rows in group_rows:
            for start in range(0, rows.size, self.chunk):
                sel = rows[start : start + self.chunk]
                idx = self._local_index(sel, j)
                gram, dev, vgrad = self._local_kernel(state, idx, want_grad=True)
                r_size = sel.size
                if j == 0:
                    lam = a_row[sel][:, None, None]
                else:
                    b = weights[sel, :j]
                    par_orig = idx[:, 1:]
                    # adjoint of the regression weights
                    gs_gather = sxg[
                        np.repeat(sel, j).reshape(r_size, j)[:, :, None],
                        self.x_cols[par_orig],
                    ]
                    gx = np.einsum("rjt,rjt->rj", self.x_values[par_orig], gs_gather)
                    t_vec = (
                        -2.0
                        * (
                            (sz[sel] - sxa[sel])[:, None] * z_all[par_orig]
                            + gx
                            - sz[sel][:, None] * xa_all[par_orig]
                        )
                        * inv_sqrt_d[sel][:, None]
                    )
                    s_vec = np.linalg.solve(gram[:, 1:, 1:], t_vec[..., None])[..., 0]
                    lam = np.empty((r_size, j + 1, j + 1))
                    av = a_row[sel]
                    lam[:, 0, 0] = av
                    cross = 0.5 * (s_vec - 2.0 * av[:, None] * b)
                    lam[:, 0, 1:] = cross
                    lam[:, 1:, 0] = cross
                    lam[:, 1:, 1:] = av[:, None, None] * (
                        b[:, :, None] * b[:, None, :]
                    ) - 0.5 * (
                        s_vec[:, :, None] * b[:, None, :]
                        + b[:, :, None] * s_vec[:, None, :]
                    )
                # variance-profile adjoint: row sums of lam * deviation kernel
                roww = np.einsum("rpq,rpq->rp", lam, dev)
                flat_idx = idx.ravel()
                rho_acc += np.bincount(flat_idx, weights=roww.ravel(), minlength=n)
                nug_grad += float(np.einsum("rpp->", lam))
                if vgrad is not None and cfg.variant.has_vertical_warp:
                    v_mat = lam * vgrad
                    rowsum_v = v_mat.sum(axis=2)
                    if cfg.variant is Variant.VERT_CV:
                        uv = state["axial"][idx][:, :, -1]
                        t1 = uv * rowsum_v - np.einsum("rpq,rq->rp", v_mat, uv)
                        u_acc[:, -1] += np.bincount(
                            flat_idx, weights=2.0 * t1.ravel(), minlength=n
                        )
                    elif cfg.variant.has_horizontal_warp:
                        ax = state["axial"][idx]
                        t1 = ax * rowsum_v[:, :, None] - v_mat @ ax
                        ub = 2.0 * t1 @ state["corr"]
                        for col in range(cfg.dim + 1):
                            u_acc[:, col] += np.bincount(
                                flat_idx, weights=ub[:, :, col].ravel(), minlength=n
                            )
                        if cfg.variant.has_geometric_warp:
                            w3 += 2.0 * (
                                np.einsum("rp,rpi,rpj->ij", rowsum_v, ax, ax)
                                - np.einsum("rpi,rpj->ij", v_mat @ ax, ax)
                            )

        grads: dict = {}
        kappa = np.empty(self.k_zeta + 1)
        kappa[0] = float(np.sum(rho_acc))
        if self.k_zeta:
            kappa[1:] = self.phi_csr.T @ rho_acc
        grads["kappa"] = kappa
        for d in range(cfg.dim + 1):
            if theta.gamma[d].size:
                grads[f"gamma_full{d}"] = self.tails[d].T @ u_acc[:, d]
        if cfg.variant.has_geometric_warp:
            grads["corr"] = np.triu(theta.corr_factor @ w3)
        grads["sigma_eps_sq"] = np.array([nug_grad])

        # sigma_beta^2 enters through the coefficient prior precision
        sb = theta.sigma_beta_sq
        gbb = g_mat[2:, 2:]
        tr = 2.0 * float(np.trace(gbb)) - gbb[-1, -1]
        tr -= 2.0 * float(np.sum(np.diag(gbb, 1)))
        grads["sigma_beta_sq"] = np.array([-tr / sb**2 + self.k_beta / sb])
        return grads


# ---------------------------------------------------------------------------
# Public functional surface
# ---------------------------------------------------------------------------


def marginal_log_likelihood(ctx: PosteriorContext, theta: ParameterVector) -> float:
    """Gaussian log-density of the data with the mean coefficients integrated out."""
    return ctx.evaluate(theta)["mll"]


def log_posterior(ctx: PosteriorContext, theta: ParameterVector) -> float:
    lp = log_prior(theta, ctx.cfg)
    if not math.isfinite(lp):
        return -math.inf
    return marginal_log_likelihood(ctx, theta) + lp


def unconstrained_log_posterior(
    ctx: PosteriorContext, x: np.ndarray, include_jacobian: bool = True
) -> float:
    theta = ctx.chart.decode(x)
    lp = log_posterior(ctx, theta)
    if include_jacobian:
        lp += ctx.chart.log_jacobian(x)
    return lp


def _collapse_gamma(ctx, theta, mll_grads, prior_grads):
    """Combine full-increment likelihood grads with per-free-parameter prior grads."""
    cfg = ctx.cfg
    out = {}
    counts = cfg.free_increment_counts()
    for d, free in enumerate(counts):
        if free == 0:
            continue
        vertical = d == cfg.dim
        g_like = mll_grads.get(f"gamma_full{d}", np.zeros(cfg.awu_orders[d]))
        if not vertical and cfg.tie_horizontal_awus:
            g_like = g_like + mll_grads.get("gamma_full1", np.zeros(cfg.awu_orders[1]))
        if free == 1:
            collapsed = np.array([float(np.sum(g_like))])
        else:
            collapsed = g_like
        out[f"gamma{d}"] = -0.5 * collapsed + prior_grads.get(
            f"gamma{d}", np.zeros(free)
        )
    return out


def log_posterior_gradient(
    ctx: PosteriorContext,
    x: np.ndarray,
    include_jacobian: bool = True,
    method: str = "analytic",
    fd_step: float = 1e-5,
):
    """Log-posterior and its gradient in the unconstrained chart.

    ``method="fd"`` switches to central finite differences of the full
    objective (the auditing fallback).
    """
    x = np.asarray(x, dtype=float)
    if method == "fd":
        value = unconstrained_log_posterior(ctx, x, include_jacobian)
        grad = np.empty_like(x)
        for i in range(x.size):
            up = x.copy()
            up[i] += fd_step
            dn = x.copy()
            dn[i] -= fd_step
            grad[i] = (
                unconstrained_log_posterior(ctx, up, include_jacobian)
                - unconstrained_log_posterior(ctx, dn, include_jacobian)
            ) / (2 * fd_step)
        return value, grad
    if method != "analytic":
        raise ValueError("method must be 'analytic' or 'fd'")

    chart = ctx.chart
    theta = chart.decode(x)
    res = ctx.evaluate(theta, want_grad=True)
    prior_val = log_prior(theta, ctx.cfg)
    value = res["mll"] + prior_val
    mll_grads = res["grads"]
    prior_grads = log_prior_gradient(theta, ctx.cfg)

    blocks: dict = {}
    blocks["kappa"] = -0.5 * mll_grads["kappa"] + prior_grads["kappa"]
    blocks.update(_collapse_gamma(ctx, theta, mll_grads, prior_grads))
    if ctx.cfg.variant.has_geometric_warp:
        blocks["corr"] = -0.5 * mll_grads["corr"] + prior_grads["corr"]
    blocks["sigma_eps_sq"] = -0.5 * mll_grads["sigma_eps_sq"] + prior_grads["sigma_eps_sq"]
    blocks["sigma_beta_sq"] = -0.5 * mll_grads["sigma_beta_sq"] + prior_grads["sigma_beta_sq"]
    if not ctx.cfg.variant.constant_variance:
        blocks["ell_zeta"] = prior_grads["ell_zeta"]
        blocks["sigma_zeta_sq"] = prior_grads["sigma_zeta_sq"]

    grad = np.zeros(chart.dim)
    grad[chart.slices["kappa"]] = blocks["kappa"]
    counts = ctx.cfg.free_increment_counts()
    for d, free in enumerate(counts):
        if free == 0:
            continue
        sl = chart.slices[f"gamma{d}"]
        vertical = d == ctx.cfg.dim
        g_free = blocks[f"gamma{d}"]
        if vertical:
            gam = theta.gamma[d][:free] if free > 1 else theta.gamma[d][:1]
            grad[sl] = g_free * gam
        else:
            lo, hi = ctx.cfg.hyper.gamma_bounds(d)
            gval = float(theta.gamma[d][0])
            s = (gval - lo) / (hi - lo)
            grad[sl] = g_free * (hi - lo) * s * (1.0 - s)
    if "corr" in chart.slices:
        jac = chart.corr_factor_jacobian(x)
        gr = blocks["corr"]
        grad[chart.slices["corr"]] = np.einsum("jkl,kl->j", jac, gr)
    for name in ("sigma_eps_sq", "sigma_beta_sq", "ell_zeta", "sigma_zeta_sq"):
        if name in chart.slices and name in blocks:
            theta_val = getattr(theta, name)
            grad[chart.slices[name]] = blocks[name] * theta_val
    if include_jacobian:
        value += chart.log_jacobian(x)
        grad += chart.log_jacobian_gradient(x)
    return value, grad


def mean_coefficients_full_conditional(ctx: PosteriorContext, theta: ParameterVector):
    """Mean and information Cholesky of the mean-coefficient full conditional.

    The full conditional is Gaussian with covariance equal to the inverse of
    the information matrix O; returns ``(mean, chol)`` where ``chol`` is the
    lower Cholesky factor of O. Use :func:`sample_mean_coefficients` to draw.
    """
    res = ctx.evaluate(theta, want_extras=True)
    return res["omega_mean"], np.tril(res["o_chol"][0])


def sample_mean_coefficients(mean, info_chol, rng, size=None):
    """Draw from the coefficient full conditional given its information Cholesky."""
    from scipy.linalg import solve_triangular

    k = mean.size
    if size is None:
        e = rng.standard_normal(k)
    else:
        e = rng.standard_normal((k, size))
    draw = solve_triangular(info_chol.T, e, lower=False)
    return mean + (draw if size is None else draw.T)
