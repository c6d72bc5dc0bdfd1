"""MAP estimation and adaptive random-walk MCMC in the unconstrained chart.

MAP runs a quasi-Newton line search from several random prior draws and keeps
the best mode; the sampler is a Metropolis random walk whose proposal
covariance adapts only during burn-in (diminishing adaptation, frozen after).
Both work on any target callable, so they are unit-testable on injected
objectives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .core import ModelConfig, ParameterChart, ParameterVector
from .posterior import (
    PosteriorContext,
    log_posterior_gradient,
    mean_coefficients_full_conditional,
    sample_mean_coefficients,
)

__all__ = [
    "MapResult",
    "McmcResult",
    "InferenceError",
    "fit_map",
    "fit_mcmc",
    "minimize_multistart",
    "adaptive_random_walk",
    "split_rhat",
    "draw_from_priors",
]

_FAIL = 1e30


class InferenceError(RuntimeError):
    """Raised when every optimization start fails."""


# ---------------------------------------------------------------------------
# Prior draws for initialization
# ---------------------------------------------------------------------------

def _truncated(ppf, rng, lo=0.01, hi=0.99):
    return float(ppf(rng.uniform(lo, hi)))


def draw_from_priors(cfg: ModelConfig, k_zeta: int, rng: np.random.Generator) -> ParameterVector:
    """One parameter vector drawn from the priors, tails cut at the 1%/99% points."""
    hyper = cfg.hyper
    var = cfg.variant
    sigma_eps_sq = _truncated(stats.invgamma(hyper.a_eps, scale=hyper.b_eps).ppf, rng)
    sigma_beta_sq = _truncated(stats.invgamma(hyper.a_beta, scale=hyper.b_beta).ppf, rng)
    eta = _truncated(stats.norm(0, math.sqrt(hyper.sigma_eta_sq)).ppf, rng)
    if var.constant_variance:
        kappa = np.array([eta])
        ell, sigma_zeta_sq = 1.0, 1.0
    else:
        ell = _truncated(stats.halfnorm(scale=math.sqrt(hyper.sigma_ell_sq)).ppf, rng)
        sigma_zeta_sq = _truncated(stats.invgamma(hyper.a_zeta, scale=hyper.b_zeta).ppf, rng)
        from .prior import exponential_decay_correlation

        corr = exponential_decay_correlation(k_zeta, ell)
        zeta = math.sqrt(sigma_zeta_sq) * np.linalg.cholesky(
            corr + 1e-10 * np.eye(k_zeta)
        ) @ rng.standard_normal(k_zeta)
        kappa = np.concatenate([[eta], zeta])
    gamma = []
    for d in range(cfg.dim):
        if not var.has_horizontal_warp:
            gamma.append(np.empty(0))
            continue
        if cfg.tie_horizontal_awus and d > 0:
            gamma.append(gamma[0])
            continue
        lo, hi = hyper.gamma_bounds(d)
        u = rng.uniform(0.01, 0.99)
        g = 1.0 / (1.0 / lo - u * (1.0 / lo - 1.0 / hi))
        gamma.append(np.full(cfg.awu_orders[d], g))
    if var.has_vertical_warp:
        gd = stats.gamma(hyper.a_gamma_vert, scale=1.0 / hyper.b_gamma_vert)
        if var.linear_vertical:
            gamma.append(np.full(cfg.awu_orders[-1], _truncated(gd.ppf, rng)))
        else:
            u = rng.uniform(0.01, 0.99, size=cfg.awu_orders[-1])
            gamma.append(gd.ppf(u))
    else:
        gamma.append(np.empty(0))
    k = cfg.dim + 1
    if var.has_geometric_warp:
        # C-vine draw through the canonical partial correlations
        raw = []
        for i in range(1, k):
            for j in range(i):
                alpha = hyper.rho_r + (k - 2 - j) / 2.0
                u = rng.uniform(0.01, 0.99)
                z = 2.0 * stats.beta(alpha, alpha).ppf(u) - 1.0
                raw.append(math.atanh(np.clip(z, -1 + 1e-12, 1 - 1e-12)))
        from .core import _corr_cholesky_from_raw

        corr_factor = _corr_cholesky_from_raw(np.asarray(raw), k).T
    else:
        corr_factor = np.eye(k)
    return ParameterVector(
        kappa=kappa,
        gamma=tuple(gamma),
        corr_factor=corr_factor,
        sigma_eps_sq=sigma_eps_sq,
        sigma_beta_sq=sigma_beta_sq,
        ell_zeta=ell,
        sigma_zeta_sq=sigma_zeta_sq,
    )


# ---------------------------------------------------------------------------
# Multi-start quasi-Newton maximization
# ---------------------------------------------------------------------------

@dataclass
class StartDiagnostics:
    start_index: int
    converged: bool
    n_iterations: int
    final_value: float
    message: str
    trace: list = field(default_factory=list)


@dataclass
class MapResult:
    x: np.ndarray
    theta: ParameterVector
    omega: np.ndarray
    log_posterior: float
    diagnostics: list

    @property
    def best_start(self) -> int:
        finite = [d for d in self.diagnostics if math.isfinite(d.final_value)]
        return max(finite, key=lambda d: d.final_value).start_index


def minimize_multistart(
    value_and_grad,
    starts,
    max_iterations: int = 2000,
    gradient_tol: float = 1e-5,
    coordinate_box: float = 30.0,
    memory: int = 20,
):
    """Maximize a target from several starting points; returns (best_x, best_value, diags).

    ``value_and_grad(x)`` returns (value, gradient) of the target to maximize.
    Each start runs restarted L-BFGS rounds (restarting clears stale curvature
    memory on ill-conditioned ridges) until the gradient tolerance is met, the
    iteration budget is spent, or a round stops improving. Coordinates are
    boxed at ``+/- coordinate_box``: boundary modes (which this model's
    inverse-length-scale priors genuinely produce) otherwise send log or logit
    coordinates to infinity. Failures (non-finite values, linear-algebra
    breakdowns) poison a start, not the whole search.
    """

    def objective(x):
        try:
            v, g = value_and_grad(x)
        except (FloatingPointError, np.linalg.LinAlgError):
            return _FAIL, np.zeros_like(x)
        if not math.isfinite(v) or not np.isfinite(g).all():
            return _FAIL, np.zeros_like(x)
        return -v, -g

    diags = []
    best = None
    for i, x0 in enumerate(starts):
        trace = []

        def cb(xk):
            trace.append(-objective(xk)[0])

        x = np.clip(np.asarray(x0, dtype=float), -coordinate_box, coordinate_box)
        bounds = [(-coordinate_box, coordinate_box)] * x.size
        budget = max_iterations
        value = -math.inf
        message = ""
        n_done = 0
        converged = False
        while budget > 0:
            res = optimize.minimize(
                objective,
                x,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                callback=cb,
                options={
                    "maxiter": min(500, budget),
                    "gtol": gradient_tol,
                    "ftol": 1e-13,
                    "maxcor": memory,
                },
            )
            n_done += int(res.nit)
            budget -= max(int(res.nit), 1)
            new_value = (
                -res.fun if math.isfinite(res.fun) and res.fun < _FAIL / 2 else -math.inf
            )
            message = str(res.message)
            x = res.x
            improved = new_value > value + 1e-9
            value = max(value, new_value)
            gnorm = float(np.linalg.norm(res.jac)) if np.isfinite(res.jac).all() else np.inf
            if gnorm < gradient_tol:
                converged = True
                break
            if not improved:
                # at a boundary mode or a flat ridge; accept the point
                converged = math.isfinite(value)
                break
        diags.append(
            StartDiagnostics(
                start_index=i,
                converged=converged,
                n_iterations=n_done,
                final_value=value,
                message=message,
                trace=trace,
            )
        )
        if math.isfinite(value) and (best is None or value > best[1]):
            best = (x.copy(), value)
    if best is None:
        raise InferenceError(
            "every start failed to produce a finite objective; traces: "
            + "; ".join(d.message for d in diags)
        )
    return best[0], best[1], diags


def fit_map(
    ctx: PosteriorContext,
    n_starts: int = 10,
    seed: int = 0,
    max_iterations: int = 2000,
    gradient_tol: float = 1e-5,
    gradient_method: str = "analytic",
    max_draw_attempts: int = 100,
) -> MapResult:
    """Maximum a posteriori fit via multi-start L-BFGS.

    Starting points are prior draws (tails truncated) re-drawn until the
    posterior is finite; the best run by final log-posterior wins. The mean
    coefficients are set to their full-conditional mean at the mode.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    chart = ctx.chart

    def value_and_grad(x):
        return log_posterior_gradient(
            ctx, x, include_jacobian=False, method=gradient_method
        )

    streams = np.random.SeedSequence(seed).spawn(n_starts)
    starts = []
    for stream in streams:
        rng = np.random.default_rng(stream)
        for _ in range(max_draw_attempts):
            theta0 = draw_from_priors(ctx.cfg, ctx.k_zeta, rng)
            x0 = chart.encode(theta0)
            try:
                v, _ = value_and_grad(x0)
            except (FloatingPointError, np.linalg.LinAlgError):
                continue
            if math.isfinite(v) and v > -_FAIL / 2:
                starts.append(x0)
                break
        else:
            raise InferenceError("could not draw a finite starting point from the priors")
    best_x, best_value, diags = minimize_multistart(
        value_and_grad, starts, max_iterations, gradient_tol
    )
    theta = chart.decode(best_x)
    omega, _ = mean_coefficients_full_conditional(ctx, theta)
    return MapResult(
        x=best_x, theta=theta, omega=omega, log_posterior=best_value, diagnostics=diags
    )


# ---------------------------------------------------------------------------
# Adaptive random-walk Metropolis
# ---------------------------------------------------------------------------

@dataclass
class McmcResult:
    chains: np.ndarray  # (n_chains, n_kept, dim)
    log_posteriors: np.ndarray  # (n_chains, n_kept)
    omega_draws: np.ndarray | None  # (n_chains, n_kept, k_beta + 2)
    acceptance_rates: np.ndarray
    rhat: np.ndarray

    def stacked(self) -> np.ndarray:
        return self.chains.reshape(-1, self.chains.shape[-1])


def adaptive_random_walk(
    logpdf,
    x0: np.ndarray,
    n_iterations: int,
    n_burnin: int,
    rng: np.random.Generator,
    target_acceptance: float = 0.234,
    initial_scale: float = 0.1,
    adapt_start: int = 100,
):
    """Random-walk Metropolis with burn-in-only covariance adaptation.

    The proposal is Gaussian with covariance ``scale^2 * (C + eps I)``; during
    burn-in, ``C`` tracks the running chain covariance and the scale follows a
    diminishing Robbins-Monro recursion toward the target acceptance rate.
    Both freeze at the end of burn-in. Returns (kept_samples, kept_logpdfs,
    acceptance_rate_after_burnin).
    """
    x0 = np.asarray(x0, dtype=float)
    dim = x0.size
    if n_iterations <= n_burnin:
        raise ValueError("n_iterations must exceed n_burnin")
    x = x0.copy()
    lp = float(logpdf(x))
    if not math.isfinite(lp):
        raise ValueError("initial point has non-finite target density")
    mean = x.copy()
    cov = np.eye(dim)
    chol = None
    if initial_scale > 0:
        log_scale = math.log(initial_scale / math.sqrt(dim))
    else:
        log_scale = -math.inf
    kept = np.empty((n_iterations - n_burnin, dim))
    kept_lp = np.empty(n_iterations - n_burnin)
    accepted_post = 0
    for t in range(n_iterations):
        adapting = t < n_burnin
        if chol is None or adapting:
            chol = np.linalg.cholesky(cov + 1e-10 * np.eye(dim))
        step = math.exp(log_scale) * (chol @ rng.standard_normal(dim))
        accept = False
        if np.any(step != 0.0):
            prop = x + step
            lp_prop = float(logpdf(prop))
            if math.isfinite(lp_prop) and math.log(rng.uniform()) < lp_prop - lp:
                x, lp = prop, lp_prop
                accept = True
        if adapting:
            # diminishing adaptation of scale and running covariance
            gamma = 1.0 / (t + 1.0) ** 0.6
            log_scale += gamma * ((1.0 if accept else 0.0) - target_acceptance)
            delta = x - mean
            mean += delta / (t + 2.0)
            cov = (1.0 - 1.0 / (t + 2.0)) * cov + np.outer(delta, x - mean) / (t + 2.0)
            if t == adapt_start:
                cov = cov + np.eye(dim) * 1e-8
        else:
            idx = t - n_burnin
            kept[idx] = x
            kept_lp[idx] = lp
            if accept:
                accepted_post += 1
    rate = accepted_post / max(n_iterations - n_burnin, 1)
    return kept, kept_lp, rate


def split_rhat(chains: np.ndarray) -> np.ndarray:
    """Split-Rhat per coordinate for chains shaped (n_chains, n_draws, dim)."""
    chains = np.asarray(chains, dtype=float)
    c, n, dim = chains.shape
    half = n // 2
    splits = chains[:, : 2 * half].reshape(c * 2, half, dim)
    means = splits.mean(axis=1)
    vars_ = splits.var(axis=1, ddof=1)
    w = vars_.mean(axis=0)
    b = half * means.var(axis=0, ddof=1)
    var_hat = (half - 1) / half * w + b / half
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.sqrt(var_hat / w)
    return np.where(w > 0, out, 1.0)


def fit_mcmc(
    ctx: PosteriorContext,
    n_chains: int = 4,
    n_iterations: int = 2000,
    n_burnin: int = 1000,
    seed: int = 0,
    thin: int = 1,
    draw_omega: bool = True,
    initial_scale: float = 0.1,
    acceptance_warning: float = 0.01,
    warn=None,
) -> McmcResult:
    """Adaptive random-walk sampling of the marginalized posterior.

    Chains start from prior draws; each retained parameter sample optionally
    carries one draw of the mean coefficients from their full conditional.
    Acceptance below ``acceptance_warning`` triggers a diagnostic callback,
    not a failure.
    """
    chart = ctx.chart

    def logpdf(x):
        try:
            from .posterior import unconstrained_log_posterior

            return unconstrained_log_posterior(ctx, x, include_jacobian=True)
        except (FloatingPointError, np.linalg.LinAlgError):
            return -math.inf

    streams = np.random.SeedSequence([seed, 2]).spawn(n_chains)
    all_chains = []
    all_lp = []
    rates = []
    omega_chains = [] if draw_omega else None
    for stream in streams:
        rng = np.random.default_rng(stream)
        for _ in range(100):
            theta0 = draw_from_priors(ctx.cfg, ctx.k_zeta, rng)
            x0 = chart.encode(theta0)
            if math.isfinite(logpdf(x0)):
                break
        else:
            raise InferenceError("no finite starting point for a chain")
        kept, kept_lp, rate = adaptive_random_walk(
            logpdf, x0, n_iterations, n_burnin, rng, initial_scale=initial_scale
        )
        kept = kept[::thin]
        kept_lp = kept_lp[::thin]
        if rate < acceptance_warning and warn is not None:
            warn(f"chain acceptance rate {rate:.4f} below {acceptance_warning}")
        if draw_omega:
            omegas = np.empty((kept.shape[0], ctx.k_beta + 2))
            for i, xs in enumerate(kept):
                mean, info_chol = mean_coefficients_full_conditional(
                    ctx, chart.decode(xs)
                )
                omegas[i] = sample_mean_coefficients(mean, info_chol, rng)
            omega_chains.append(omegas)
        all_chains.append(kept)
        all_lp.append(kept_lp)
        rates.append(rate)
    chains = np.stack(all_chains)
    return McmcResult(
        chains=chains,
        log_posteriors=np.stack(all_lp),
        omega_draws=np.stack(omega_chains) if draw_omega else None,
        acceptance_rates=np.asarray(rates),
        rhat=split_rhat(chains),
    )
