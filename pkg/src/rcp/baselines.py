"""Reference counterfactual imputers: direct outcome, CATE-adjusted, matching."""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from rcp.conformal import FittedArm, WidthForm, to_width_form
from rcp.core import BootstrapReplicates, _pick, percentile_radii
from rcp.data import Dataset

logger = logging.getLogger(__name__)


@dataclass
class BaselinePrediction:
    point: np.ndarray
    interval: Optional[tuple] = None
    donor_count: Optional[np.ndarray] = None


def _widths(arm0: FittedArm, arm1: FittedArm, x, widths):
    if widths is not None:
        return widths
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return to_width_form(arm0, x), to_width_form(arm1, x)


def do_predict(arm0: FittedArm, arm1: FittedArm, x, t, widths: Optional[tuple[WidthForm, WidthForm]] = None):
    """Direct outcome: the other arm's mean and its baseline interval ``[mu - l, mu + u]``."""
    w0, w1 = _widths(arm0, arm1, x, widths)
    point = _pick(t, w1.mu_hat, w0.mu_hat)
    l = _pick(t, w1.l, w0.l)
    u = _pick(t, w1.u, w0.u)
    return BaselinePrediction(point, (point - l, point + u))


def cate_adjusted_predict(
    arm0: FittedArm,
    arm1: FittedArm,
    x,
    y,
    t,
    replicates: Optional[BootstrapReplicates] = None,
    level: float = 0.1,
    widths: Optional[tuple[WidthForm, WidthForm]] = None,
):
    """Factual outcome shifted by the T-learner effect ``mu1(x) - mu0(x)``.

    The point is written as ``mu_other + (y - mu_own)``, algebraically
    ``y +/- tau(x)``. The interval (only with ``replicates``) is the point plus
    the bootstrap percentile radii of tau.
    """
    w0, w1 = _widths(arm0, arm1, x, widths)
    point = _pick(t, w1.mu_hat + (y - w0.mu_hat), w0.mu_hat + (y - w1.mu_hat))
    if replicates is None:
        return BaselinePrediction(point)
    tau = w1.mu_hat - w0.mu_hat
    r_l, r_u = percentile_radii(replicates.tau(), tau, level)
    # t=1 subtracts tau, so the radii swap sides
    lo = point - _pick(t, r_l, r_u)
    hi = point + _pick(t, r_u, r_l)
    return BaselinePrediction(point, (lo, hi))


# --- Student-t quantile -------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_cdf(x: float, df: float) -> float:
    tail = 0.5 * betainc_regularized(df / 2.0, 0.5, df / (df + x * x))
    return 1.0 - tail if x >= 0 else tail


@functools.lru_cache(maxsize=256)
def student_t_ppf(p: float, df: float) -> float:
    """Quantile of Student's t by bisection on the incomplete-beta CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if df <= 0:
        raise ValueError("df must be positive")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -student_t_ppf(1.0 - p, df)
    hi = 1.0
    while student_t_cdf(hi, df) < p:
        hi *= 2.0
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if student_t_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return 0.5 * (lo + hi)


# --- matching -------------------------------------------------------------------


@dataclass(frozen=True)
class MatchingParams:
    k: int = 5
    with_replacement: bool = True
    metric: str = "mahalanobis"
    t_level: float = 0.95

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.metric != "mahalanobis":
            raise ValueError("only the mahalanobis metric is supported")
        if not 0.5 < self.t_level < 1.0:
            raise ValueError("t_level must lie in (0.5, 1)")


def donor_half_width(donors, t_level: float = 0.95) -> float:
    """``t_{level, K-1} * s / sqrt(K)`` for K >= 2 donor outcomes, 0 for K = 1."""
    donors = np.asarray(donors, dtype=float)
    k = donors.size
    if k < 2:
        return 0.0
    return student_t_ppf(t_level, k - 1) * float(np.std(donors, ddof=1)) / math.sqrt(k)


class Matcher:
    """Nearest-neighbour imputation from the opposite arm.

    Covariates are standardized column-wise on the full dataset, then whitened
    with the inverse covariance of the standardized data, so Euclidean distance
    in the whitened space is the Mahalanobis distance.
    """

    def __init__(self, ds: Dataset, params: MatchingParams = MatchingParams()):
        self.ds = ds
        self.params = params
        x = ds.covariates
        self.center = x.mean(axis=0)
        scale = x.std(axis=0, ddof=1) if ds.n > 1 else np.ones(ds.d)
        self.scale = np.where(scale > 0, scale, 1.0)
        z = (x - self.center) / self.scale
        self.diagonal_fallback = False
        cov = np.atleast_2d(np.cov(z, rowvar=False)) if ds.n > 1 else np.eye(ds.d)
        try:
            if np.linalg.cond(cov) > 1e12:
                raise np.linalg.LinAlgError("ill-conditioned")
            chol = np.linalg.cholesky(cov)
            self._whiten = np.linalg.inv(chol).T
        except np.linalg.LinAlgError:
            logger.warning("singular covariate covariance; matching on per-column variances only")
            self.diagonal_fallback = True
            self._whiten = np.eye(ds.d)
        self._z = z @ self._whiten

    def transform(self, x) -> np.ndarray:
        return ((np.atleast_2d(np.asarray(x, dtype=float)) - self.center) / self.scale) @ self._whiten

    def donors(self, x, t) -> list[np.ndarray]:
        """Dataset row indices of the matched donors for each query unit."""
        zq = self.transform(x)
        t = np.atleast_1d(np.asarray(t)).ravel()
        if zq.shape[0] != t.size:
            raise ValueError("x and t have different lengths")
        out: list = [None] * t.size
        for arm in (0, 1):
            q = np.flatnonzero(t == arm)
            if q.size == 0:
                continue
            pool = self.ds.arm(1 - arm)
            if pool.size == 0:
                raise ValueError(f"no donors: arm {1 - arm} is empty")
            k = self.params.k
            if pool.size < k:
                logger.warning("arm %d has only %d donors; reducing k from %d", 1 - arm, pool.size, k)
                k = pool.size
            zp = self._z[pool]
            used = np.zeros(pool.size, dtype=bool)
            for start in range(0, q.size, 512):
                block = q[start:start + 512]
                d2 = ((zq[block, None, :] - zp[None, :, :]) ** 2).sum(axis=2)
                order = np.argsort(d2, axis=1, kind="stable")
                for row, i in enumerate(block):
                    if self.params.with_replacement:
                        out[i] = pool[order[row, :k]]
                    else:
                        free = order[row][~used[order[row]]][:k]
                        if free.size == 0:
                            raise ValueError("ran out of donors matching without replacement")
                        used[free] = True
                        out[i] = pool[free]
        return out

    def predict(self, x, t) -> BaselinePrediction:
        matched = self.donors(x, t)
        y = self.ds.outcome
        point = np.array([y[m].mean() for m in matched])
        half = np.array([donor_half_width(y[m], self.params.t_level) for m in matched])
        count = np.array([m.size for m in matched])
        return BaselinePrediction(point, (point - half, point + half), count)


def matching_predict(ds: Dataset, x, t, params: MatchingParams = MatchingParams()) -> BaselinePrediction:
    return Matcher(ds, params).predict(x, t)
