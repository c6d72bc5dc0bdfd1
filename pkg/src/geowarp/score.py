"""Proper scoring rules, the two comparison baselines, and cross-validation.

Scores follow the usual negative orientation (lower is better). The
cross-validation loop withholds one sounding at a time, fits each requested
model on the rest, scores measurement-level predictions at the withheld
depths that at least one training sounding reaches, and averages per sounding
before averaging over the site.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import ModelConfig, SiteDataset, Variant
from .infer import fit_map
from .posterior import PosteriorContext
from .predict import predict_measurements

__all__ = [
    "mse",
    "crps_gaussian",
    "crps_empirical",
    "interval_score_95",
    "dss",
    "dss2",
    "LinearBaseline",
    "BinnedBaseline",
    "ScoreReport",
    "cross_validate",
    "GEOWARP_MODELS",
    "BASELINE_MODELS",
]

_Z975 = stats.norm.ppf(0.975)
GEOWARP_MODELS = ("full", "nowarp", "cv", "nowarpcv", "vertcv", "wncv")
BASELINE_MODELS = ("linear", "binned")


class ScoreError(ValueError):
    """Degenerate inputs to a scoring rule."""


def mse(pred_means, obs) -> float:
    pred_means = np.asarray(pred_means, dtype=float)
    obs = np.asarray(obs, dtype=float)
    return float(np.mean((pred_means - obs) ** 2))


def crps_gaussian(mu, sigma, obs):
    """Closed-form CRPS of a Gaussian forecast; vectorizes over inputs."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if np.any(sigma <= 0):
        raise ScoreError("sigma must be positive")
    z = (obs - mu) / sigma
    out = sigma * (
        z * (2.0 * stats.norm.cdf(z) - 1.0)
        + 2.0 * stats.norm.pdf(z)
        - 1.0 / math.sqrt(math.pi)
    )
    return float(out) if out.ndim == 0 else out


def crps_empirical(samples, obs) -> float:
    """CRPS of an empirical forecast distribution for one observation."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise ScoreError("need at least one sample")
    obs = float(obs)
    term1 = float(np.mean(np.abs(x - obs)))
    i = np.arange(1, n + 1)
    pair_sum = 2.0 * float(np.sum((2.0 * i - n - 1.0) * x))
    return term1 - pair_sum / (2.0 * n * n)


def interval_score_95(lower, upper, obs):
    """Interval score of the central 95% interval (alpha = 0.05)."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if np.any(upper < lower):
        raise ScoreError("upper must be >= lower")
    alpha = 0.05
    out = (
        (upper - lower)
        + (2.0 / alpha) * (lower - obs) * (obs < lower)
        + (2.0 / alpha) * (obs - upper) * (obs > upper)
    )
    return float(out) if out.ndim == 0 else out


def dss(mu, sigma, obs):
    """Univariate Dawid-Sebastiani score: log variance plus squared z-score."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if np.any(sigma <= 0):
        raise ScoreError("sigma must be positive")
    out = 2.0 * np.log(sigma) + ((obs - mu) / sigma) ** 2
    return float(out) if out.ndim == 0 else out


def dss2(mu2, cov2x2, obs2) -> float:
    """Bivariate Dawid-Sebastiani score for one pair."""
    mu2 = np.asarray(mu2, dtype=float)
    cov = np.asarray(cov2x2, dtype=float)
    obs2 = np.asarray(obs2, dtype=float)
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if det <= 0 or cov[0, 0] <= 0:
        raise ScoreError("pair covariance must be positive definite")
    resid = obs2 - mu2
    quad = float(resid @ np.linalg.solve(cov, resid))
    return math.log(det) + quad


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------


@dataclass
class LinearBaseline:
    """Ordinary least squares on depth with a plug-in residual variance."""

    intercept: float
    slope: float
    residual_var: float

    @classmethod
    def fit(cls, dataset: SiteDataset) -> "LinearBaseline":
        h = np.concatenate([s.depths for s in dataset.soundings])
        z = np.concatenate([s.values for s in dataset.soundings])
        if h.size < 3 or np.unique(h).size < 2:
            raise ScoreError("linear baseline needs 3+ points at 2+ distinct depths")
        design = np.column_stack([np.ones_like(h), h])
        coef, *_ = np.linalg.lstsq(design, z, rcond=None)
        resid = z - design @ coef
        s2 = float(resid @ resid) / max(h.size - 2, 1)
        return cls(float(coef[0]), float(coef[1]), max(s2, 1e-12))

    def predict(self, depths):
        depths = np.asarray(depths, dtype=float)
        mu = self.intercept + self.slope * depths
        sd = np.full_like(mu, math.sqrt(self.residual_var))
        return mu, sd


@dataclass
class BinnedBaseline:
    """Depth-binned empirical forecast: per-bin mean and ECDF.

    Bins are left-closed right-open multiples of the bin width. Depths whose
    bin holds no training value cannot be scored and are reported as excluded.
    """

    bin_width: float
    bins: dict

    @classmethod
    def fit(cls, dataset: SiteDataset, bin_width: float = 0.1) -> "BinnedBaseline":
        h = np.concatenate([s.depths for s in dataset.soundings])
        z = np.concatenate([s.values for s in dataset.soundings])
        idx = np.floor(h / bin_width + 1e-9).astype(np.int64)
        bins = {}
        for b in np.unique(idx):
            bins[int(b)] = np.sort(z[idx == b])
        return cls(bin_width, bins)

    def bin_of(self, depth: float) -> int:
        return int(math.floor(depth / self.bin_width + 1e-9))

    def covered(self, depths) -> np.ndarray:
        return np.array([self.bin_of(h) in self.bins for h in np.atleast_1d(depths)])

    def point_forecast(self, depth: float) -> float:
        return float(np.mean(self.bins[self.bin_of(depth)]))

    def samples(self, depth: float) -> np.ndarray:
        return self.bins[self.bin_of(depth)]

    def interval_95(self, depth: float):
        vals = self.bins[self.bin_of(depth)]
        return float(np.quantile(vals, 0.025)), float(np.quantile(vals, 0.975))


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------


@dataclass
class ScoreReport:
    """Leave-one-sounding-out scores: per-CPT tables, site means, and ties."""

    site: str
    models: list
    metrics: list
    per_cpt: dict  # model -> metric -> {cpt_id: value}
    means: dict  # model -> metric -> float
    best: dict  # metric -> model
    tied_with_best: dict  # metric -> set of models (includes the best)
    failed_folds: list = field(default_factory=list)
    excluded_counts: dict = field(default_factory=dict)

    def to_table(self) -> list:
        """Rows (metric, model, site value, overall value) matching the report CSV."""
        rows = []
        for metric in self.metrics:
            for model in self.models:
                v = self.means[model].get(metric)
                if v is None:
                    continue
                rows.append(
                    {
                        "metric": metric,
                        "model": model,
                        self.site: v,
                        "All": v,
                        "best_or_tied": model in self.tied_with_best.get(metric, set()),
                    }
                )
        return rows

    def to_dict(self) -> dict:
        return {
            "site": self.site,
            "models": list(self.models),
            "metrics": list(self.metrics),
            "per_cpt": {
                m: {met: dict(v) for met, v in t.items()} for m, t in self.per_cpt.items()
            },
            "means": {m: dict(t) for m, t in self.means.items()},
            "best": dict(self.best),
            "tied_with_best": {k: sorted(v) for k, v in self.tied_with_best.items()},
            "failed_folds": list(self.failed_folds),
            "excluded_counts": dict(self.excluded_counts),
        }


METRICS = ["MSE", "CRPS", "Int05", "DSS", "DSS2"]


def _variant_config(base_cfg: ModelConfig, name: str) -> ModelConfig:
    from dataclasses import replace

    return replace(base_cfg, variant=Variant(name))


def _eligible_mask(withheld, train_soundings):
    max_reach = max(float(s.depths[-1]) for s in train_soundings)
    return withheld.depths <= max_reach + 1e-9


def _score_gaussian_marginals(obs, mu, sd, pair_cov, pair_obs, pair_mu):
    out = {
        "MSE": mse(mu, obs),
        "CRPS": float(np.mean(crps_gaussian(mu, sd, obs))),
        "Int05": float(
            np.mean(interval_score_95(mu - _Z975 * sd, mu + _Z975 * sd, obs))
        ),
        "DSS": float(np.mean(dss(mu, sd, obs))),
    }
    if pair_cov is not None and len(pair_cov):
        vals = [
            dss2(pair_mu[k], pair_cov[k], pair_obs[k]) for k in range(len(pair_cov))
        ]
        out["DSS2"] = float(np.mean(vals))
    return out


def cross_validate(
    dataset: SiteDataset,
    models,
    base_cfg: ModelConfig | None = None,
    m: int = 50,
    m_predict: int = 100,
    seed: int = 0,
    site_name: str = "site",
    map_starts: int = 2,
    map_iterations: int = 600,
    warn=None,
) -> ScoreReport:
    """Leave-one-sounding-out comparison of the requested models.

    ``models`` mixes process-model variant names with the baselines. Model
    fits happen per fold; a failed fit excludes that fold from the model's
    scores (with a warning) instead of aborting the study. Ties with the best
    model are assessed per metric by one-sided Welch t-tests at the 5% level
    over per-sounding scores.
    """
    if dataset.n_soundings < 2:
        raise ScoreError("cross-validation needs at least two soundings")
    base_cfg = base_cfg or ModelConfig()
    # warp extents are a site property: folds must accept predictions at
    # withheld locations on the site's convex hull
    from .core import round_up_depth
    from .warp import domain_bounds

    site_bounds = domain_bounds(dataset, base_cfg, round_up_depth(dataset.h_max, base_cfg))
    models = list(models)
    unknown = [mn for mn in models if mn not in GEOWARP_MODELS + BASELINE_MODELS]
    if unknown:
        raise ScoreError(f"unknown models: {unknown}")

    per_cpt = {mn: {metric: {} for metric in METRICS} for mn in models}
    failed = []
    excluded = {}

    for fold, withheld in enumerate(dataset.soundings):
        train = tuple(s for s in dataset.soundings if s.id != withheld.id)
        train_ds = SiteDataset(train, h_max=dataset.h_max, dim=dataset.dim)
        eligible = _eligible_mask(withheld, train)
        excluded[withheld.id] = int(np.sum(~eligible))
        if not np.any(eligible):
            continue
        depths = withheld.depths[eligible]
        obs = withheld.values[eligible]
        coords = np.empty((depths.size, dataset.dim + 1))
        coords[:, : dataset.dim] = withheld.location
        coords[:, dataset.dim] = depths
        # vertically-adjacent eligible pairs within the withheld sounding
        orig_idx = np.flatnonzero(eligible)
        adjacent = np.flatnonzero(np.diff(orig_idx) == 1)
        pairs = np.column_stack([adjacent, adjacent + 1])

        for k, name in enumerate(models):
            try:
                scores = _score_one_model(
                    name, base_cfg, train_ds, withheld, coords, obs, pairs,
                    m, m_predict, np.random.SeedSequence([seed, fold, k]),
                    map_starts, map_iterations, site_bounds,
                )
            except Exception as exc:  # noqa: BLE001 - fold isolation is the contract
                failed.append({"fold": withheld.id, "model": name, "error": str(exc)})
                if warn is not None:
                    warn(f"fold {withheld.id}, model {name} failed: {exc}")
                continue
            for metric, value in scores.items():
                per_cpt[name][metric][withheld.id] = value

    means = {
        mn: {
            metric: float(np.mean(list(vals.values())))
            for metric, vals in per_cpt[mn].items()
            if vals
        }
        for mn in models
    }
    best, tied = _rank_models(models, per_cpt, means)
    metrics_present = [metric for metric in METRICS if any(metric in means[mn] for mn in models)]
    return ScoreReport(
        site=site_name,
        models=models,
        metrics=metrics_present,
        per_cpt=per_cpt,
        means=means,
        best=best,
        tied_with_best=tied,
        failed_folds=failed,
        excluded_counts=excluded,
    )


def _score_one_model(
    name, base_cfg, train_ds, withheld, coords, obs, pairs, m, m_predict, seed_seq,
    map_starts, map_iterations, site_bounds,
):
    seeds = seed_seq.generate_state(3)
    if name == "linear":
        model = LinearBaseline.fit(train_ds)
        mu, sd = model.predict(coords[:, -1])
        pair_cov = np.stack(
            [np.diag([model.residual_var, model.residual_var]) for _ in pairs]
        ) if len(pairs) else None
        pair_mu = mu[pairs] if len(pairs) else None
        pair_obs = obs[pairs] if len(pairs) else None
        return _score_gaussian_marginals(obs, mu, sd, pair_cov, pair_obs, pair_mu)
    if name == "binned":
        model = BinnedBaseline.fit(train_ds)
        covered = model.covered(coords[:, -1])
        if not np.any(covered):
            raise ScoreError("no covered bins for this fold")
        point = np.array([model.point_forecast(h) for h in coords[covered, -1]])
        y = obs[covered]
        crps_vals = [
            crps_empirical(model.samples(h), yy)
            for h, yy in zip(coords[covered, -1], y)
        ]
        intervals = np.array([model.interval_95(h) for h in coords[covered, -1]])
        return {
            "MSE": mse(point, y),
            "CRPS": float(np.mean(crps_vals)),
            "Int05": float(
                np.mean(interval_score_95(intervals[:, 0], intervals[:, 1], y))
            ),
        }
    cfg = _variant_config(base_cfg, name)
    ctx = PosteriorContext(train_ds, cfg, m=m, seed=int(seeds[0]), bounds=site_bounds)
    fit = fit_map(ctx, n_starts=map_starts, seed=int(seeds[1]),
                  max_iterations=map_iterations)
    res = predict_measurements(
        ctx, fit.theta, fit.omega, coords, m=m_predict, seed=int(seeds[2]),
        pair_indices=pairs if len(pairs) else None,
    )
    pair_mu = res.mean[pairs] if len(pairs) else None
    pair_obs = obs[pairs] if len(pairs) else None
    return _score_gaussian_marginals(
        obs, res.mean, res.marginal_sd, res.pair_cov, pair_obs, pair_mu
    )


def _rank_models(models, per_cpt, means):
    best = {}
    tied = {}
    for metric in METRICS:
        scored = [mn for mn in models if metric in means[mn]]
        if not scored:
            continue
        best_model = min(scored, key=lambda mn: means[mn][metric])
        best[metric] = best_model
        ties = {best_model}
        base_vals = np.array(list(per_cpt[best_model][metric].values()))
        for mn in scored:
            if mn == best_model:
                continue
            vals = np.array(list(per_cpt[mn][metric].values()))
            if vals.size < 2 or base_vals.size < 2:
                continue
            if np.allclose(vals.var(ddof=1) + base_vals.var(ddof=1), 0.0):
                if np.allclose(vals.mean(), base_vals.mean()):
                    ties.add(mn)
                continue
            t_res = stats.ttest_ind(vals, base_vals, equal_var=False, alternative="greater")
            if t_res.pvalue >= 0.05:
                ties.add(mn)
        tied[metric] = ties
    return best, tied
