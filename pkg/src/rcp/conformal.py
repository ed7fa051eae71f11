"""Conformalized quantile regression, one calibrated interval model per treatment arm."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import numpy as np

from rcp.data import Dataset, SplitPlan
from rcp.forest import ForestParams, MeanModel, QuantileModel, fit_forest, predict_quantiles

logger = logging.getLogger(__name__)


def conformity_score(y, lo, hi):
    """Distance of ``y`` outside ``[lo, hi]``; zero inside."""
    return np.maximum(np.maximum(np.subtract(lo, y), np.subtract(y, hi)), 0.0)


def conformal_offset(scores, alpha: float) -> tuple[float, bool]:
    """The ceil((m+1)(1-alpha))-th smallest score.

    Returns ``(offset, capped)``; ``capped`` is True when the rank exceeds m and
    the largest score was used instead of +inf.
    """
    s = np.sort(np.asarray(scores, dtype=float).ravel())
    m = s.size
    if m == 0:
        raise ValueError("empty calibration arm")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    # the epsilon keeps e.g. 10 * 0.9 from rounding up to rank 10
    rank = math.ceil((m + 1) * (1.0 - alpha) - 1e-9)
    if rank > m:
        return float(s[-1]), True
    return float(s[max(rank, 1) - 1]), False


@dataclass(frozen=True, eq=False)
class FittedArm:
    arm: int
    mean: MeanModel
    q_lo: QuantileModel
    q_hi: QuantileModel
    alpha: float = 0.1
    offset: float = -math.inf
    warnings: tuple = ()

    @property
    def calibrated(self) -> bool:
        return math.isfinite(self.offset)

    def _quantiles(self, x):
        lo_level, hi_level = self.alpha / 2, 1 - self.alpha / 2
        if self.q_lo is self.q_hi:
            q = predict_quantiles(self.q_lo, x, [lo_level, hi_level])
            return q[:, 0], q[:, 1]
        return predict_quantiles(self.q_lo, x, [lo_level])[:, 0], predict_quantiles(self.q_hi, x, [hi_level])[:, 0]


@dataclass(frozen=True)
class WidthForm:
    """Interval ``[mu_hat - l, mu_hat + u]`` with ``l, u >= 0``.

    Fields are floats for a single unit or aligned arrays for a batch.
    ``clamped`` marks units whose mean fell outside the calibrated interval.
    """

    mu_hat: object
    l: object
    u: object
    clamped: object = False

    @property
    def lower(self):
        return self.mu_hat - self.l

    @property
    def upper(self):
        return self.mu_hat + self.u

    @property
    def width(self):
        return self.l + self.u

    def take(self, idx) -> "WidthForm":
        return WidthForm(*(np.asarray(f)[idx] for f in (self.mu_hat, self.l, self.u, self.clamped)))


def fit_arm(rows, targets, arm: int, alpha: float = 0.1, params: ForestParams = ForestParams()) -> FittedArm:
    """Uncalibrated arm. Mean and quantile views share one forest, which is what
    fitting them separately with the same params and seed would produce anyway."""
    forest = fit_forest(rows, targets, params)
    q = QuantileModel(forest)
    return FittedArm(arm=arm, mean=MeanModel(forest), q_lo=q, q_hi=q, alpha=alpha)


def calibrate(rows, targets, arm: FittedArm) -> FittedArm:
    x = np.atleast_2d(np.asarray(rows, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    if y.size == 0:
        raise ValueError(f"empty calibration set for arm {arm.arm}")
    if x.shape[0] != y.size:
        raise ValueError(f"dimension mismatch: {x.shape[0]} rows, {y.size} targets")
    lo, hi = arm._quantiles(x)
    offset, capped = conformal_offset(conformity_score(y, lo, hi), arm.alpha)
    warnings = arm.warnings
    if capped:
        msg = (
            f"arm {arm.arm}: {y.size} calibration units too few for alpha={arm.alpha}; "
            "using the largest score as offset"
        )
        logger.warning(msg)
        warnings = warnings + (msg,)
    return dataclasses.replace(arm, offset=offset, warnings=warnings)


def _require_calibrated(arm: FittedArm):
    if not arm.calibrated:
        raise ValueError(f"arm {arm.arm} is not calibrated")


def predict_interval(arm: FittedArm, x):
    """Calibrated interval ``[q_lo(x) - offset, q_hi(x) + offset]``."""
    _require_calibrated(arm)
    single = np.ndim(x) == 1
    lo, hi = arm._quantiles(x)
    lo, hi = lo - arm.offset, hi + arm.offset
    if single:
        return float(lo[0]), float(hi[0])
    return lo, hi


def to_width_form(arm: FittedArm, x) -> WidthForm:
    _require_calibrated(arm)
    single = np.ndim(x) == 1
    x2, _ = arm.mean.forest.check_x(x)
    mu = arm.mean.forest.mean(x2)
    lo, hi = predict_interval(arm, x2)
    l = np.maximum(mu - lo, 0.0)
    u = np.maximum(hi - mu, 0.0)
    clamped = (mu < lo) | (mu > hi)
    if single:
        return WidthForm(float(mu[0]), float(l[0]), float(u[0]), bool(clamped[0]))
    return WidthForm(mu, l, u, clamped)


def arm_seed(seed: int, arm: int) -> int:
    return int(np.random.SeedSequence([seed & (2**64 - 1), 0xA2, arm]).generate_state(1, np.uint64)[0] >> 1)


def fit_arms(
    ds: Dataset,
    plan: SplitPlan,
    alpha: float = 0.1,
    params: ForestParams = ForestParams(),
    train_rows=None,
) -> tuple[FittedArm, FittedArm]:
    """Fit each arm on its training rows and calibrate on its calibration rows.

    ``train_rows`` overrides ``plan.train_indices`` (may contain repeats, as in
    a bootstrap resample). Arm seeds derive from ``params.seed`` and the arm.
    """
    train = plan.train_indices if train_rows is None else np.asarray(train_rows)
    arms = []
    for t in (0, 1):
        tr = train[ds.treatment[train] == t]
        ca = plan.calib_indices[ds.treatment[plan.calib_indices] == t]
        if tr.size == 0 or ca.size == 0:
            raise ValueError(f"arm {t} is empty in the training or calibration part")
        p = dataclasses.replace(params, seed=arm_seed(params.seed, t))
        fitted = fit_arm(ds.covariates[tr], ds.outcome[tr], t, alpha, p)
        arms.append(calibrate(ds.covariates[ca], ds.outcome[ca], fitted))
    return arms[0], arms[1]
