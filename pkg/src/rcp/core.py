"""Retrospective counterfactual prediction RCP(rho).

Given per-arm baselines ``[mu_t(x) - l_t(x), mu_t(x) + u_t(x)]`` and an assumed
cross-world correlation rho, the counterfactual of a unit observed at ``y``
under arm ``t`` is predicted by shifting the other arm's mean along the
factual residual, and its interval is shrunk by ``sqrt(1 - rho^2)``.

All functions broadcast over numpy arrays, so a batch of units is handled by
passing aligned ``y``, ``t`` arrays and batch :class:`WidthForm` objects.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.stats import norm

from rcp.conformal import FittedArm, WidthForm, fit_arms, to_width_form
from rcp.data import Dataset, SplitPlan, split
from rcp.forest import ForestParams

logger = logging.getLogger(__name__)

VARIANTS = ("c_rho", "c_rho_plus_ci", "auto")


class DegenerateIntervalError(ValueError):
    """A baseline interval has zero total width, so the width ratio is undefined."""


@dataclass(frozen=True)
class RhoSpec:
    """Cross-world correlation: a constant, or a table of cells looked up by nearest center."""

    constant: Optional[float] = 0.0
    centers: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.centers is None:
            if self.constant is None or not -1.0 <= self.constant <= 1.0:
                raise ValueError(f"rho must lie in [-1, 1], got {self.constant!r}")
            return
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        v = np.asarray(self.values, dtype=float).ravel()
        if c.shape[0] != v.size or v.size == 0:
            raise ValueError("rho table needs one value per cell center")
        if np.any(np.abs(v) > 1.0) or not np.all(np.isfinite(v)):
            raise ValueError("every rho table value must lie in [-1, 1]")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "constant", None)

    @classmethod
    def table(cls, centers, values) -> "RhoSpec":
        return cls(None, centers, values)

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.centers is None:
            return np.full(x.shape[0], float(self.constant))
        if x.shape[1] != self.centers.shape[1]:
            raise ValueError("rho table and query covariates differ in dimension")
        d2 = ((x[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return self.values[np.argmin(d2, axis=1)]


def lambda_ratio(w0: WidthForm, w1: WidthForm, lambda_one: bool = False):
    """Relative baseline width ``(l1 + u1) / (l0 + u0)``.

    With ``lambda_one`` the equal-variance fallback 1 is returned instead.
    """
    if lambda_one:
        return np.ones_like(np.asarray(w0.mu_hat, dtype=float)) if np.ndim(w0.mu_hat) else 1.0
    den = np.asarray(w0.l + w0.u, dtype=float)
    num = np.asarray(w1.l + w1.u, dtype=float)
    if np.any(den <= 0) or np.any(num <= 0):
        bad = int(np.count_nonzero((den <= 0) | (num <= 0)))
        raise DegenerateIntervalError(
            f"degenerate-interval: {bad} unit(s) have a zero-width baseline interval; "
            "pass lambda_one=True to use lambda = 1"
        )
    lam = num / den
    return float(lam) if lam.ndim == 0 else lam


def _check_rho(rho):
    r = np.asarray(rho, dtype=float)
    if np.any(~(np.abs(r) <= 1.0)):
        raise ValueError(f"rho must lie in [-1, 1], got {rho!r}")


def _pick(t, for_t0, for_t1):
    out = np.where(np.asarray(t) == 0, for_t0, for_t1)
    return float(out) if out.ndim == 0 else out


def mu_rho(y, t, w0: WidthForm, w1: WidthForm, rho, lambda_one: bool = False):
    """Point prediction of the unobserved potential outcome."""
    _check_rho(rho)
    lam = lambda_ratio(w0, w1, lambda_one)
    from_control = w1.mu_hat + rho * lam * (y - w0.mu_hat)
    from_treated = w0.mu_hat + rho * (1.0 / lam) * (y - w1.mu_hat)
    return _pick(t, from_control, from_treated)


def _shrink(rho):
    return np.sqrt(np.maximum(1.0 - np.square(rho), 0.0))


def c_rho(y, t, w0: WidthForm, w1: WidthForm, rho, lambda_one: bool = False):
    """Prediction interval ``mu_rho -/+ sqrt(1 - rho^2) * (l, u)`` of the unobserved arm."""
    m = mu_rho(y, t, w0, w1, rho, lambda_one)
    s = _shrink(rho)
    l = _pick(t, w1.l, w0.l)
    u = _pick(t, w1.u, w0.u)
    return m - s * l, m + s * u


def c_rho_plus_ci(y, t, w0: WidthForm, w1: WidthForm, rho, r_l, r_u, c=None, lambda_one: bool = False):
    """C_rho widened by ``c`` times a confidence interval ``(r_l, r_u)`` for mu_rho; ``c`` defaults to rho^2."""
    if c is None:
        c = np.square(rho)
    if np.any(np.asarray(c) < 0) or np.any(np.asarray(c) > 1):
        raise ValueError("c must lie in [0, 1]")
    m = mu_rho(y, t, w0, w1, rho, lambda_one)
    s = _shrink(rho)
    l = _pick(t, w1.l, w0.l)
    u = _pick(t, w1.u, w0.u)
    return m - c * r_l - s * l, m + c * r_u + s * u


# --- bootstrap ----------------------------------------------------------------


def empirical_quantile(values, beta: float, axis: int = 0):
    """Smallest value whose cumulative share reaches ``beta`` (left-continuous inverse)."""
    v = np.sort(np.asarray(values, dtype=float), axis=axis)
    n = v.shape[axis]
    k = int(np.ceil(beta * n - 1e-9))
    k = min(max(k, 1), n)
    return np.take(v, k - 1, axis=axis)


def percentile_radii(replicates, point, level: float):
    """``(r_l, r_u)`` from the (level/2, 1-level/2) percentiles, floored at zero."""
    lo = empirical_quantile(replicates, level / 2, axis=0)
    hi = empirical_quantile(replicates, 1 - level / 2, axis=0)
    return np.maximum(point - lo, 0.0), np.maximum(hi - point, 0.0)


@dataclass(frozen=True)
class PipelineParams:
    alpha: float = 0.1
    calib_fraction: float = 0.2
    forest: ForestParams = field(default_factory=ForestParams)
    seed: int = 0
    lambda_one: bool = False


@dataclass(frozen=True)
class BootstrapReplicates:
    """Per-replicate arm width forms at the query points, arrays of shape (B, n_query)."""

    w0: WidthForm
    w1: WidthForm

    @property
    def B(self) -> int:
        return np.shape(self.w0.mu_hat)[0]

    def mu_rho(self, y, t, rho, lambda_one: bool = False) -> np.ndarray:
        return mu_rho(np.asarray(y)[None, :], np.asarray(t)[None, :], self.w0, self.w1, rho, lambda_one)

    def tau(self) -> np.ndarray:
        return self.w1.mu_hat - self.w0.mu_hat


def _seed_int(*entropy) -> int:
    return int(np.random.SeedSequence([e & (2**64 - 1) for e in entropy]).generate_state(1, np.uint64)[0] >> 1)


def bootstrap_replicates(
    ds: Dataset,
    plan: SplitPlan,
    x,
    params: PipelineParams,
    B: int = 100,
    max_retries: int = 10,
) -> BootstrapReplicates:
    """Pairs bootstrap: resample training rows with replacement within each arm,
    refit and recalibrate both arms, evaluate the width forms at ``x``.

    Replicate ``b`` draws from a stream keyed on ``(params.seed, b)`` only, so
    results do not depend on execution order.
    """
    if B < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    train_arms = [plan.train_indices[ds.treatment[plan.train_indices] == t] for t in (0, 1)]
    cols = {k: [] for k in ("mu0", "l0", "u0", "c0", "mu1", "l1", "u1", "c1")}
    for b in range(B):
        for attempt in range(max_retries + 1):
            rng = np.random.default_rng(np.random.SeedSequence([params.seed & (2**64 - 1), 0xB007, b, attempt]))
            rows = np.sort(np.concatenate([rng.choice(idx, size=idx.size, replace=True) for idx in train_arms]))
            forest = dataclasses.replace(params.forest, seed=_seed_int(params.seed, 0xF0, b, attempt))
            try:
                a0, a1 = fit_arms(ds, plan, params.alpha, forest, train_rows=rows)
                break
            except ValueError as exc:
                logger.warning("bootstrap replicate %d attempt %d failed: %s", b, attempt, exc)
        else:
            raise RuntimeError(f"bootstrap replicate {b} failed {max_retries + 1} times")
        w0, w1 = to_width_form(a0, x), to_width_form(a1, x)
        for suffix, w in (("0", w0), ("1", w1)):
            cols["mu" + suffix].append(w.mu_hat)
            cols["l" + suffix].append(w.l)
            cols["u" + suffix].append(w.u)
            cols["c" + suffix].append(w.clamped)
    arr = {k: np.vstack(v) for k, v in cols.items()}
    return BootstrapReplicates(
        WidthForm(arr["mu0"], arr["l0"], arr["u0"], arr["c0"]),
        WidthForm(arr["mu1"], arr["l1"], arr["u1"], arr["c1"]),
    )


def bootstrap_ci(
    ds: Dataset,
    x,
    y,
    t,
    rho,
    params: PipelineParams = PipelineParams(),
    B: int = 100,
    level: Optional[float] = None,
    point=None,
    replicates: Optional[BootstrapReplicates] = None,
):
    """Percentile confidence radii ``(r_l, r_u)`` for mu_rho at the query units.

    ``point`` is the full-data mu_rho; it is computed from a fresh fit when
    omitted. ``level`` defaults to ``params.alpha``.
    """
    level = params.alpha if level is None else level
    plan = split(ds, params.calib_fraction, params.seed)
    if point is None:
        a0, a1 = fit_arms(ds, plan, params.alpha, params.forest)
        point = mu_rho(y, t, to_width_form(a0, np.atleast_2d(x)), to_width_form(a1, np.atleast_2d(x)), rho, params.lambda_one)
    if replicates is None:
        replicates = bootstrap_replicates(ds, plan, x, params, B)
    reps = replicates.mu_rho(np.atleast_1d(y), np.atleast_1d(t), rho, params.lambda_one)
    r_l, r_u = percentile_radii(reps, point, level)
    if np.ndim(point) == 0:
        return float(np.ravel(r_l)[0]), float(np.ravel(r_u)[0])
    return r_l, r_u


# --- Gaussian oracle --------------------------------------------------------------

Fn = Union[float, Callable[[np.ndarray], np.ndarray]]


def _eval(f: Fn, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if callable(f):
        return np.asarray(f(x), dtype=float).reshape(x.shape[0])
    return np.full(x.shape[0], float(f))


@dataclass(frozen=True)
class GaussianOracle:
    """Bivariate-normal potential outcomes given ``x``: means, standard deviations, correlation."""

    mu0: Fn
    mu1: Fn
    sigma0: Fn
    sigma1: Fn
    rho: float

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")
        for s in (self.sigma0, self.sigma1):
            if not callable(s) and not s > 0:
                raise ValueError("standard deviations must be positive")

    def moments(self, x):
        return _eval(self.mu0, x), _eval(self.mu1, x), _eval(self.sigma0, x), _eval(self.sigma1, x)


def oracle_mu(o: GaussianOracle, x, y, t):
    """Exact E[Y(1-t) | X=x, Y(t)=y]."""
    m0, m1, s0, s1 = o.moments(x)
    out = np.where(
        np.asarray(t) == 0,
        m1 + o.rho * (s1 / s0) * (y - m0),
        m0 + o.rho * (s0 / s1) * (y - m1),
    )
    return float(out[0]) if np.ndim(y) == 0 and out.size == 1 else out


def oracle_interval(o: GaussianOracle, x, y, t, alpha: float = 0.1):
    """Shortest (1 - alpha) conditional interval: mean -/+ z * sigma_cf * sqrt(1 - rho^2)."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    m = oracle_mu(o, x, y, t)
    _, _, s0, s1 = o.moments(x)
    half = norm.ppf(1 - alpha / 2) * np.where(np.asarray(t) == 0, s1, s0) * np.sqrt(max(1.0 - o.rho**2, 0.0))
    if np.ndim(m) == 0:
        half = float(half[0])
    return m - half, m + half


# --- high-level predictor ------------------------------------------------------------


@dataclass
class CounterfactualPrediction:
    """Batch of predictions; every field is aligned with the query units."""

    point: np.ndarray
    interval: tuple
    lam: np.ndarray
    corrected_interval: Optional[tuple] = None
    ci_radii: Optional[tuple] = None
    clamped: Optional[np.ndarray] = None
    n_bootstrap: int = 0


def uses_correction(variant: str, rho) -> np.ndarray:
    """Which units get the bootstrap-corrected interval.

    ``auto`` corrects when |rho| > 0.5 and keeps plain C_rho otherwise.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown interval variant {variant!r}; choose from {', '.join(VARIANTS)}")
    r = np.abs(np.asarray(rho, dtype=float))
    if variant == "c_rho":
        return np.zeros(r.shape, dtype=bool)
    if variant == "c_rho_plus_ci":
        return np.ones(r.shape, dtype=bool)
    return r > 0.5


class RetrospectivePredictor:
    """Fit the per-arm baselines once, then predict counterfactuals for any rho."""

    def __init__(self, params: PipelineParams = PipelineParams()):
        self.params = params
        self.ds: Optional[Dataset] = None

    def fit(self, ds: Dataset) -> "RetrospectivePredictor":
        ds.require_both_arms()
        self.ds = ds
        self.plan = split(ds, self.params.calib_fraction, self.params.seed)
        self.arm0, self.arm1 = fit_arms(ds, self.plan, self.params.alpha, self.params.forest)
        return self

    @property
    def arms(self) -> tuple[FittedArm, FittedArm]:
        return self.arm0, self.arm1

    def widths(self, x) -> tuple[WidthForm, WidthForm]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return to_width_form(self.arm0, x), to_width_form(self.arm1, x)

    def bootstrap(self, x, B: int = 100) -> BootstrapReplicates:
        return bootstrap_replicates(self.ds, self.plan, x, self.params, B)

    def predict(
        self,
        x,
        y,
        t,
        rho: Union[float, RhoSpec],
        variant: str = "c_rho",
        B: int = 100,
        widths: Optional[tuple[WidthForm, WidthForm]] = None,
        replicates: Optional[BootstrapReplicates] = None,
    ) -> CounterfactualPrediction:
        if self.ds is None:
            raise RuntimeError("call fit() first")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        t = np.asarray(t).ravel()
        r = rho(x) if isinstance(rho, RhoSpec) else np.full(y.shape, float(rho))
        w0, w1 = widths if widths is not None else self.widths(x)
        one = self.params.lambda_one
        point = mu_rho(y, t, w0, w1, r, one)
        interval = c_rho(y, t, w0, w1, r, one)
        pred = CounterfactualPrediction(
            point=point,
            interval=interval,
            lam=lambda_ratio(w0, w1, one) * np.ones_like(point),
            clamped=np.asarray(w0.clamped) | np.asarray(w1.clamped),
        )
        correct = uses_correction(variant, r)
        if correct.any():
            if replicates is None:
                replicates = self.bootstrap(x, B)
            reps = replicates.mu_rho(y, t, r, one)
            r_l, r_u = percentile_radii(reps, point, self.params.alpha)
            lo, hi = c_rho_plus_ci(y, t, w0, w1, r, r_l, r_u, lambda_one=one)
            pred.corrected_interval = (np.where(correct, lo, interval[0]), np.where(correct, hi, interval[1]))
            pred.ci_radii = (r_l, r_u)
            pred.n_bootstrap = replicates.B
        return pred
