"""Core domain types: datasets, configuration, and the model parameter vector.

All types here are frozen after construction (arrays are marked read-only),
so they are safe to share across threads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

__all__ = [
    "Variant",
    "Coordinate",
    "Sounding",
    "SiteDataset",
    "Hyperparameters",
    "ModelConfig",
    "ParameterVector",
    "MeanCoefficients",
    "ParameterChart",
    "unconstrained_encode",
    "unconstrained_decode",
    "parameter_count",
    "round_up_depth",
    "ConfigurationError",
    "DomainError",
]


class ConfigurationError(ValueError):
    """Raised when a configuration or parameter vector is inconsistent."""


class DomainError(ValueError):
    """Raised when a coordinate falls outside the model's spatial domain."""


class Variant(enum.Enum):
    """Model variants toggling warping and the depth-varying variance."""

    FULL = "full"
    NOWARP = "nowarp"
    CV = "cv"
    NOWARP_CV = "nowarpcv"
    VERT_CV = "vertcv"
    WHITE_NOISE_CV = "wncv"

    @property
    def constant_variance(self) -> bool:
        return self in (
            Variant.CV,
            Variant.NOWARP_CV,
            Variant.VERT_CV,
            Variant.WHITE_NOISE_CV,
        )

    @property
    def has_geometric_warp(self) -> bool:
        return self in (Variant.FULL, Variant.CV)

    @property
    def linear_vertical(self) -> bool:
        """Vertical axis restricted to equal increments (a linear rescaling)."""
        return self in (Variant.NOWARP, Variant.NOWARP_CV)

    @property
    def has_horizontal_warp(self) -> bool:
        return self not in (Variant.VERT_CV, Variant.WHITE_NOISE_CV)

    @property
    def has_vertical_warp(self) -> bool:
        return self is not Variant.WHITE_NOISE_CV


@dataclass(frozen=True)
class Coordinate:
    """A single point: horizontal position ``s`` (length D) and depth ``h`` in meters."""

    s: np.ndarray
    h: float

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.s, dtype=float))
        if s.ndim != 1 or s.size not in (1, 2):
            raise ValueError("horizontal coordinate must have dimension 1 or 2")
        if not np.isfinite(s).all() or not math.isfinite(self.h):
            raise ValueError("coordinate entries must be finite")
        if self.h < 0:
            raise ValueError("depth must be nonnegative")
        s.setflags(write=False)
        object.__setattr__(self, "s", s)

    @property
    def dim(self) -> int:
        return self.s.size

    def as_array(self) -> np.ndarray:
        """Return the point as a (D+1,) array ``(s_1, ..., s_D, h)``."""
        return np.concatenate([self.s, [self.h]])


@dataclass(frozen=True)
class Sounding:
    """One depth-indexed measurement column at a fixed horizontal location.

    ``values`` holds log cone-tip resistance (log-MPa); ``depths`` must be
    strictly increasing.
    """

    id: str
    location: np.ndarray
    depths: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.location, dtype=float))
        depths = np.asarray(self.depths, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if loc.size not in (1, 2):
            raise ValueError(f"sounding {self.id}: location must have 1 or 2 coordinates")
        if depths.ndim != 1 or depths.size == 0:
            raise ValueError(f"sounding {self.id}: needs at least one depth")
        if depths.size != values.size:
            raise ValueError(f"sounding {self.id}: depths and values lengths differ")
        if np.any(np.diff(depths) <= 0):
            raise ValueError(f"sounding {self.id}: depths must be strictly increasing")
        if np.any(depths < 0):
            raise ValueError(f"sounding {self.id}: depths must be nonnegative")
        if not (np.isfinite(loc).all() and np.isfinite(depths).all() and np.isfinite(values).all()):
            raise ValueError(f"sounding {self.id}: non-finite entries")
        for arr, name in ((loc, "location"), (depths, "depths"), (values, "values")):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.depths.size


@dataclass(frozen=True)
class SiteDataset:
    """A site: one or more soundings plus the depth extent of interest."""

    soundings: tuple
    h_max: float
    dim: int

    def __post_init__(self):
        if not self.soundings:
            raise ValueError("dataset must contain at least one sounding")
        soundings = tuple(self.soundings)
        ids = [s.id for s in soundings]
        if len(set(ids)) != len(ids):
            raise ValueError("sounding ids must be unique")
        for s in soundings:
            if s.location.size != self.dim:
                raise ValueError(f"sounding {s.id}: dimension {s.location.size} != {self.dim}")
            if s.depths[-1] > self.h_max + 1e-9:
                raise ValueError(f"sounding {s.id}: depth exceeds h_max={self.h_max}")
        object.__setattr__(self, "soundings", soundings)

    @classmethod
    def from_soundings(cls, soundings, h_max=None) -> "SiteDataset":
        dim = soundings[0].location.size if not np.isscalar(soundings[0].location) else 1
        max_depth = max(float(s.depths[-1]) for s in soundings)
        return cls(tuple(soundings), float(h_max) if h_max is not None else max_depth, dim)

    @property
    def n_points(self) -> int:
        return sum(s.n for s in self.soundings)

    @property
    def n_soundings(self) -> int:
        return len(self.soundings)

    def stacked_coords(self) -> np.ndarray:
        """All points as an (N, D+1) array, sounding blocks in order."""
        blocks = []
        for s in self.soundings:
            block = np.empty((s.n, self.dim + 1))
            block[:, : self.dim] = s.location
            block[:, self.dim] = s.depths
            blocks.append(block)
        return np.concatenate(blocks, axis=0)

    def stacked_values(self) -> np.ndarray:
        return np.concatenate([s.values for s in self.soundings])

    def sounding_index(self) -> np.ndarray:
        """Per-point index into ``soundings`` for the stacked arrays."""
        return np.concatenate(
            [np.full(s.n, i, dtype=np.intp) for i, s in enumerate(self.soundings)]
        )

    def horizontal_bounds(self) -> np.ndarray:
        """Bounding box of the sounding locations, shape (D, 2)."""
        locs = np.stack([s.location for s in self.soundings])
        return np.stack([locs.min(axis=0), locs.max(axis=0)], axis=1)


@dataclass(frozen=True)
class Hyperparameters:
    """Fixed hyperparameters of the hierarchical prior.

    Defaults are the production CPT settings: diffuse inverse-gamma priors on
    the variances, inverse-uniform bounds on the horizontal warp increments
    (length scales 0.5 m to 200 m), and a correlation prior shrinking the
    geometric warp toward isotropy.
    """

    a_eps: float = 2.437
    b_eps: float = 0.544
    sigma_alpha_sq: float = 100.0
    a_beta: float = 0.166
    b_beta: float = 8.932e-7
    sigma_eta_sq: float = 100.0
    a_zeta: float = 0.166
    b_zeta: float = 8.932e-7
    sigma_ell_sq: float = 1.0
    gamma_lower: tuple = (1.0 / 200.0, 1.0 / 200.0)
    gamma_upper: tuple = (2.0, 2.0)
    a_gamma_vert: float = 1.01
    b_gamma_vert: float = 0.01
    rho_r: float = 6.0

    def __post_init__(self):
        object.__setattr__(self, "gamma_lower", tuple(np.atleast_1d(self.gamma_lower)))
        object.__setattr__(self, "gamma_upper", tuple(np.atleast_1d(self.gamma_upper)))
        positives = [
            self.a_eps, self.b_eps, self.sigma_alpha_sq, self.a_beta, self.b_beta,
            self.sigma_eta_sq, self.a_zeta, self.b_zeta, self.sigma_ell_sq,
            self.a_gamma_vert, self.b_gamma_vert, self.rho_r,
        ]
        if any(v <= 0 for v in positives):
            raise ConfigurationError("all hyperparameters must be positive")
        for lo, hi in zip(self.gamma_lower, self.gamma_upper):
            if not 0 < lo < hi:
                raise ConfigurationError("require 0 < gamma_lower < gamma_upper")

    def gamma_bounds(self, d: int) -> tuple:
        """Inverse-uniform bounds for horizontal axis ``d`` (0-based)."""
        lo = self.gamma_lower[d] if d < len(self.gamma_lower) else self.gamma_lower[-1]
        hi = self.gamma_upper[d] if d < len(self.gamma_upper) else self.gamma_upper[-1]
        return lo, hi


@dataclass(frozen=True)
class ModelConfig:
    """Structural model choices plus all fixed hyperparameters.

    ``awu_orders`` lists the Bernstein expansion order per axis, horizontal
    axes first and the vertical axis last; its length fixes D+1. Horizontal
    axial warpings are always linear (equal increments, a single free
    increment per axis): only the vertical axis uses the full expansion.
    """

    delta_mu: float = 0.1
    delta_sigma: float = 1.0
    nu: float = 1.5
    awu_orders: tuple = (2, 2, 20)
    tie_horizontal_awus: bool = False
    variant: Variant = Variant.FULL
    include_variance_boundary_knots: bool = True
    hyper: Hyperparameters = field(default_factory=Hyperparameters)

    def __post_init__(self):
        object.__setattr__(self, "awu_orders", tuple(int(v) for v in self.awu_orders))
        if isinstance(self.variant, str):
            object.__setattr__(self, "variant", Variant(self.variant))
        if len(self.awu_orders) not in (2, 3):
            raise ConfigurationError("awu_orders must have D+1 entries with D in {1, 2}")
        if any(order < 1 for order in self.awu_orders):
            raise ConfigurationError("all AWU orders must be >= 1")
        if self.nu <= 0:
            raise ConfigurationError("nu must be positive")
        if self.delta_mu <= 0 or self.delta_sigma <= 0:
            raise ConfigurationError("knot spacings must be positive")
        if self.tie_horizontal_awus and self.dim < 2:
            raise ConfigurationError("tie_horizontal_awus requires two horizontal dimensions")

    @property
    def dim(self) -> int:
        """Number of horizontal dimensions D."""
        return len(self.awu_orders) - 1

    @property
    def vertical_order(self) -> int:
        return self.awu_orders[-1]

    def k_beta(self, h_max: float) -> int:
        """Mean-profile basis size for a site of depth ``h_max``."""
        return _knot_count(h_max, self.delta_mu, boundary=True)

    def k_zeta(self, h_max: float) -> int:
        """Variance-profile basis size; zero for constant-variance variants."""
        if self.variant.constant_variance:
            return 0
        return _knot_count(h_max, self.delta_sigma, self.include_variance_boundary_knots)

    def free_increment_counts(self) -> tuple:
        """Free warp increments per axis under the variant's restrictions."""
        counts = []
        for d in range(self.dim):
            if not self.variant.has_horizontal_warp:
                counts.append(0)
            elif self.tie_horizontal_awus and d > 0:
                counts.append(0)
            else:
                counts.append(1)
        if not self.variant.has_vertical_warp:
            counts.append(0)
        elif self.variant.linear_vertical:
            counts.append(1)
        else:
            counts.append(self.vertical_order)
        return tuple(counts)


def _knot_count(h_max: float, delta: float, boundary: bool) -> int:
    ratio = h_max / delta
    n = round(ratio)
    if abs(ratio - n) > 1e-9:
        raise ConfigurationError(
            f"h_max={h_max} is not a multiple of knot spacing {delta}; "
            "round the depth up first (see round_up_depth)"
        )
    return n + 7 if boundary else n + 3


def round_up_depth(max_depth: float, cfg: ModelConfig) -> float:
    """Smallest depth >= ``max_depth`` that both knot spacings divide exactly."""
    step = _lcm_spacing(cfg.delta_mu, cfg.delta_sigma)
    k = math.ceil(max_depth / step - 1e-9)
    return float(k * step)


def _lcm_spacing(a: float, b: float) -> float:
    fa = Fraction(a).limit_denominator(10**6)
    fb = Fraction(b).limit_denominator(10**6)
    lcm = Fraction(
        math.lcm(fa.numerator * fb.denominator, fb.numerator * fa.denominator),
        fa.denominator * fb.denominator,
    )
    return float(lcm)


@dataclass(frozen=True)
class MeanCoefficients:
    """Coefficients of the vertical mean profile: intercept/slope plus spline weights."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        beta = np.asarray(self.beta, dtype=float)
        if alpha.shape != (2,):
            raise ValueError("alpha must hold (intercept, slope)")
        alpha.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])

    @classmethod
    def from_stacked(cls, omega: np.ndarray) -> "MeanCoefficients":
        omega = np.asarray(omega, dtype=float)
        return cls(omega[:2], omega[2:])


_CORR_TOL = 1e-12


@dataclass(frozen=True)
class ParameterVector:
    """The non-marginalized unknowns of the hierarchical model.

    ``kappa`` stacks the log-variance intercept and spline coefficients;
    ``gamma`` holds one positive increment array per axis (empty where the
    variant drops the axis); ``corr_factor`` is the upper-triangular factor R
    with R'R a correlation matrix (identity when the geometric warp is off).
    """

    kappa: np.ndarray
    gamma: tuple
    corr_factor: np.ndarray
    sigma_eps_sq: float
    sigma_beta_sq: float
    ell_zeta: float = 1.0
    sigma_zeta_sq: float = 1.0

    def __post_init__(self):
        kappa = np.asarray(self.kappa, dtype=float)
        gamma = tuple(np.asarray(g, dtype=float) for g in self.gamma)
        corr = np.asarray(self.corr_factor, dtype=float)
        for arr in (kappa, corr, *gamma):
            arr.setflags(write=False)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "corr_factor", corr)

    @property
    def eta(self) -> float:
        return float(self.kappa[0])

    @property
    def zeta(self) -> np.ndarray:
        return self.kappa[1:]

    @property
    def k_zeta(self) -> int:
        return self.kappa.size - 1

    def validate(self, cfg: ModelConfig) -> None:
        """Check positivity, bounds, variant restrictions, and the correlation factor."""
        var = cfg.variant
        if self.kappa.ndim != 1 or self.kappa.size < 1:
            raise ConfigurationError("kappa must be a nonempty vector")
        if var.constant_variance and self.k_zeta != 0:
            raise ConfigurationError("constant-variance variant requires kappa = (eta,)")
        if not np.isfinite(self.kappa).all():
            raise ConfigurationError("kappa must be finite")
        if len(self.gamma) != cfg.dim + 1:
            raise ConfigurationError("gamma needs one increment array per axis")
        for d, g in enumerate(self.gamma):
            vertical = d == cfg.dim
            active = var.has_vertical_warp if vertical else var.has_horizontal_warp
            if not active:
                if g.size != 0:
                    raise ConfigurationError(f"axis {d}: variant {var.value} has no warp here")
                continue
            if g.size != cfg.awu_orders[d]:
                raise ConfigurationError(f"axis {d}: expected {cfg.awu_orders[d]} increments")
            if np.any(g <= 0) or not np.isfinite(g).all():
                raise ConfigurationError(f"axis {d}: increments must be positive and finite")
            linear = (not vertical) or var.linear_vertical
            if linear and g.size > 1 and not np.allclose(g, g[0], rtol=0, atol=1e-12):
                raise ConfigurationError(f"axis {d}: linear warp requires equal increments")
            if not vertical:
                lo, hi = cfg.hyper.gamma_bounds(d)
                if not lo <= g[0] <= hi:
                    raise ConfigurationError(
                        f"axis {d}: gamma={g[0]:.6g} outside [{lo:.6g}, {hi:.6g}]"
                    )
        if cfg.tie_horizontal_awus and var.has_horizontal_warp:
            if not np.array_equal(self.gamma[0], self.gamma[1]):
                raise ConfigurationError("tied horizontal warps must share increments")
        k = cfg.dim + 1
        if self.corr_factor.shape != (k, k):
            raise ConfigurationError(f"corr_factor must be {k}x{k}")
        if np.any(np.tril(self.corr_factor, -1) != 0):
            raise ConfigurationError("corr_factor must be upper triangular")
        if var.has_geometric_warp:
            gram_diag = np.sum(self.corr_factor**2, axis=0)
            if np.max(np.abs(gram_diag - 1.0)) > _CORR_TOL:
                raise ConfigurationError("diag(R'R) must be 1 within 1e-12")
            if np.any(np.diag(self.corr_factor) <= 0):
                raise ConfigurationError("corr_factor diagonal must be positive")
        elif not np.array_equal(self.corr_factor, np.eye(k)):
            raise ConfigurationError(f"variant {var.value} requires identity corr_factor")
        for name in ("sigma_eps_sq", "sigma_beta_sq", "ell_zeta", "sigma_zeta_sq"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigurationError(f"{name} must be positive and finite")

    def with_updates(self, **kwargs) -> "ParameterVector":
        return replace(self, **kwargs)


# ---------------------------------------------------------------------------
# Unconstrained chart
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


def _corr_cholesky_from_raw(y: np.ndarray, k: int, dtype=float) -> np.ndarray:
    """Lower-triangular L with LL' a correlation matrix, from unconstrained y.

    Uses the canonical partial-correlation construction: z = tanh(y) fills the
    strict lower triangle row-wise; each row is then scaled so it has unit norm
    with a positive diagonal. Complex dtype is supported so derivatives can be
    taken by complex step.
    """
    z = np.tanh(np.asarray(y, dtype=dtype))
    L = np.zeros((k, k), dtype=dtype)
    L[0, 0] = 1.0
    pos = 0
    for i in range(1, k):
        rem = 1.0
        for j in range(i):
            L[i, j] = z[pos] * np.sqrt(rem)
            rem = rem - L[i, j] ** 2
            pos += 1
        L[i, i] = np.sqrt(rem)
    return L


def _raw_from_corr_cholesky(L: np.ndarray) -> np.ndarray:
    k = L.shape[0]
    y = np.empty(k * (k - 1) // 2)
    pos = 0
    for i in range(1, k):
        rem = 1.0
        for j in range(i):
            z = L[i, j] / math.sqrt(rem)
            y[pos] = math.atanh(min(max(z, -1 + 1e-15), 1 - 1e-15))
            rem -= L[i, j] ** 2
            pos += 1
    return y


def _corr_cholesky_log_jacobian(y: np.ndarray, k: int, dtype=float):
    """log |d vec(L_lower) / d y| for the partial-correlation construction."""
    z = np.tanh(np.asarray(y, dtype=dtype))
    total = 0.0
    pos = 0
    for i in range(1, k):
        rem = 1.0
        for j in range(i):
            # d L_ij / d z_ij = sqrt(rem); d z / d y = 1 - z^2
            total = total + 0.5 * np.log(rem) + np.log(1.0 - z[pos] ** 2)
            rem = rem - (z[pos] * np.sqrt(rem)) ** 2
            pos += 1
    return total


class ParameterChart:
    """Bijection between valid parameter vectors and R^p.

    Positive parameters use log coordinates, bounded horizontal increments a
    scaled logit, and the correlation factor the partial-correlation
    construction whose unit-diagonal constraint holds by construction.
    """

    def __init__(self, cfg: ModelConfig, k_zeta: int):
        if cfg.variant.constant_variance and k_zeta != 0:
            raise ConfigurationError("constant-variance variants have k_zeta = 0")
        self.cfg = cfg
        self.k_zeta = int(k_zeta)
        self.k_corr = cfg.dim + 1
        n_corr = self.k_corr * (self.k_corr - 1) // 2 if cfg.variant.has_geometric_warp else 0
        self._free_gamma = cfg.free_increment_counts()
        blocks = [("kappa", self.k_zeta + 1)]
        for d, n in enumerate(self._free_gamma):
            if n:
                blocks.append((f"gamma{d}", n))
        if n_corr:
            blocks.append(("corr", n_corr))
        blocks.append(("sigma_eps_sq", 1))
        blocks.append(("sigma_beta_sq", 1))
        if not cfg.variant.constant_variance:
            blocks.append(("ell_zeta", 1))
            blocks.append(("sigma_zeta_sq", 1))
        self.slices = {}
        start = 0
        for name, size in blocks:
            self.slices[name] = slice(start, start + size)
            start += size
        self.dim = start

    # -- helpers -----------------------------------------------------------

    def _gamma_axes(self):
        """Yield (axis, free_count, is_vertical, bounds) for encoded axes."""
        cfg = self.cfg
        for d, n in enumerate(self._free_gamma):
            if n == 0:
                continue
            vertical = d == cfg.dim
            bounds = None if vertical else cfg.hyper.gamma_bounds(d)
            yield d, n, vertical, bounds

    def encode(self, theta: ParameterVector) -> np.ndarray:
        theta.validate(self.cfg)
        if theta.k_zeta != self.k_zeta:
            raise ConfigurationError(
                f"kappa has {theta.k_zeta} spline coefficients, chart expects {self.k_zeta}"
            )
        x = np.empty(self.dim)
        x[self.slices["kappa"]] = theta.kappa
        for d, n, vertical, bounds in self._gamma_axes():
            g = theta.gamma[d]
            if vertical and not self.cfg.variant.linear_vertical:
                x[self.slices[f"gamma{d}"]] = np.log(g)
            elif vertical:
                x[self.slices[f"gamma{d}"]] = math.log(g[0])
            else:
                lo, hi = bounds
                frac = (g[0] - lo) / (hi - lo)
                frac = min(max(frac, 1e-15), 1 - 1e-15)
                x[self.slices[f"gamma{d}"]] = math.log(frac / (1 - frac))
        if "corr" in self.slices:
            x[self.slices["corr"]] = _raw_from_corr_cholesky(theta.corr_factor.T)
        x[self.slices["sigma_eps_sq"]] = math.log(theta.sigma_eps_sq)
        x[self.slices["sigma_beta_sq"]] = math.log(theta.sigma_beta_sq)
        if "ell_zeta" in self.slices:
            x[self.slices["ell_zeta"]] = math.log(theta.ell_zeta)
            x[self.slices["sigma_zeta_sq"]] = math.log(theta.sigma_zeta_sq)
        return x

    def decode(self, x: np.ndarray) -> ParameterVector:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ConfigurationError(f"expected {self.dim} coordinates, got {x.shape}")
        cfg = self.cfg
        kappa = x[self.slices["kappa"]].copy()
        gamma = []
        for d in range(cfg.dim + 1):
            n = self._free_gamma[d]
            order = cfg.awu_orders[d]
            vertical = d == cfg.dim
            if n == 0:
                if not vertical and cfg.tie_horizontal_awus and cfg.variant.has_horizontal_warp:
                    gamma.append(gamma[0])
                else:
                    gamma.append(np.empty(0))
                continue
            xd = x[self.slices[f"gamma{d}"]]
            if vertical and not cfg.variant.linear_vertical:
                gamma.append(np.exp(xd))
            elif vertical:
                gamma.append(np.full(order, math.exp(xd[0])))
            else:
                lo, hi = cfg.hyper.gamma_bounds(d)
                g = lo + (hi - lo) * float(_sigmoid(xd[0]))
                gamma.append(np.full(order, g))
        if "corr" in self.slices:
            L = _corr_cholesky_from_raw(x[self.slices["corr"]], self.k_corr)
            corr = L.T
        else:
            corr = np.eye(self.k_corr)
        kwargs = dict(
            kappa=kappa,
            gamma=tuple(gamma),
            corr_factor=corr,
            sigma_eps_sq=math.exp(x[self.slices["sigma_eps_sq"]][0]),
            sigma_beta_sq=math.exp(x[self.slices["sigma_beta_sq"]][0]),
        )
        if "ell_zeta" in self.slices:
            kwargs["ell_zeta"] = math.exp(x[self.slices["ell_zeta"]][0])
            kwargs["sigma_zeta_sq"] = math.exp(x[self.slices["sigma_zeta_sq"]][0])
        return ParameterVector(**kwargs)

    def log_jacobian(self, x: np.ndarray) -> float:
        """log |d theta / d x| of the decoding map at ``x``."""
        x = np.asarray(x, dtype=float)
        total = 0.0
        for d, n, vertical, bounds in self._gamma_axes():
            xd = x[self.slices[f"gamma{d}"]]
            if vertical:
                total += float(np.sum(xd))
            else:
                lo, hi = bounds
                s = _sigmoid(xd[0])
                total += math.log(hi - lo) + math.log(s) + math.log1p(-s)
        if "corr" in self.slices:
            total += float(
                _corr_cholesky_log_jacobian(x[self.slices["corr"]], self.k_corr)
            )
        total += float(x[self.slices["sigma_eps_sq"]][0])
        total += float(x[self.slices["sigma_beta_sq"]][0])
        if "ell_zeta" in self.slices:
            total += float(x[self.slices["ell_zeta"]][0])
            total += float(x[self.slices["sigma_zeta_sq"]][0])
        return total

    def log_jacobian_gradient(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        g = np.zeros(self.dim)
        for d, n, vertical, bounds in self._gamma_axes():
            sl = self.slices[f"gamma{d}"]
            if vertical:
                g[sl] = 1.0
            else:
                g[sl] = 1.0 - 2.0 * _sigmoid(x[sl])
        if "corr" in self.slices:
            sl = self.slices["corr"]
            g[sl] = _complex_step_grad(
                lambda y: _corr_cholesky_log_jacobian(y, self.k_corr, dtype=complex), x[sl]
            )
        for name in ("sigma_eps_sq", "sigma_beta_sq", "ell_zeta", "sigma_zeta_sq"):
            if name in self.slices:
                g[self.slices[name]] = 1.0
        return g

    def corr_factor_jacobian(self, x: np.ndarray) -> np.ndarray:
        """d vec(R) / d y for the correlation block, shape (n_corr, k, k)."""
        sl = self.slices["corr"]
        y = x[sl]
        out = np.empty((y.size, self.k_corr, self.k_corr))
        h = 1e-30
        for j in range(y.size):
            yc = y.astype(complex)
            yc[j] += 1j * h
            out[j] = _corr_cholesky_from_raw(yc, self.k_corr, dtype=complex).T.imag / h
        return out


def _complex_step_grad(fn, x: np.ndarray, h: float = 1e-30) -> np.ndarray:
    g = np.empty(x.size)
    for j in range(x.size):
        xc = x.astype(complex)
        xc[j] += 1j * h
        g[j] = np.imag(fn(xc)) / h
    return g


def unconstrained_encode(theta: ParameterVector, cfg: ModelConfig) -> np.ndarray:
    """Encode a valid parameter vector into R^p (see ParameterChart)."""
    return ParameterChart(cfg, theta.k_zeta).encode(theta)


def unconstrained_decode(x: np.ndarray, cfg: ModelConfig) -> ParameterVector:
    """Inverse of :func:`unconstrained_encode`; k_zeta is inferred from len(x)."""
    x = np.asarray(x, dtype=float)
    fixed = ParameterChart(cfg, 0).dim - 1  # everything except the kappa block
    k_zeta = x.size - fixed - 1
    if k_zeta < 0:
        raise ConfigurationError("coordinate vector too short for this configuration")
    return ParameterChart(cfg, k_zeta).decode(x)


# ---------------------------------------------------------------------------
# Parameter counting
# ---------------------------------------------------------------------------

def parameter_count(cfg: ModelConfig, k_zeta: int) -> int:
    """Nominal parameter count K_zeta + D(D+1)/2 + sum(L_d) + 11, per block.

    The count follows the model's block accounting with each axial warping
    contributing its full expansion order. Documented adjustments:

    ==============  =========================================================
    variant         adjustment
    ==============  =========================================================
    full            none
    nowarp          - D(D+1)/2 (no geometric warp); each axis L_d -> 1
    cv              - K_zeta (no variance spline); - 2 (ell/sigma_zeta gone)
    nowarpcv        both of the above
    vertcv          cv adjustments; - D(D+1)/2; horizontal axes removed
    wncv            cv adjustments; - D(D+1)/2; all axes removed
    ==============  =========================================================

    ``tie_horizontal_awus`` removes the duplicated horizontal blocks. Note the
    optimized vector is smaller (horizontal warps are linear with one free
    increment each); see ``ParameterChart.dim`` for the chart dimension.
    """
    if cfg.dim < 1:
        raise ConfigurationError("at least one horizontal dimension is required")
    if k_zeta < 0:
        raise ConfigurationError("k_zeta must be nonnegative")
    var = cfg.variant
    d = cfg.dim
    kz = 0 if var.constant_variance else int(k_zeta)
    corr = d * (d + 1) // 2 if var.has_geometric_warp else 0
    gamma = 0
    for axis, order in enumerate(cfg.awu_orders):
        vertical = axis == d
        if vertical and not var.has_vertical_warp:
            continue
        if not vertical and not var.has_horizontal_warp:
            continue
        if not vertical and cfg.tie_horizontal_awus and axis > 0:
            continue
        if var.linear_vertical:
            gamma += 1
        else:
            gamma += order
    scalars = 11 - (2 if var.constant_variance else 0)
    return kz + corr + gamma + scalars
