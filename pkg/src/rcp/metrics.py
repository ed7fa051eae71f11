"""Point and interval evaluation of counterfactual predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


def _pair(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty input")
    return a, b


def _mean(v: np.ndarray) -> float:
    # math.fsum is exact, so the result does not depend on summation order
    return math.fsum(v.tolist()) / v.size


def mse(pred, truth) -> float:
    p, y = _pair(pred, truth)
    return _mean((p - y) ** 2)


def _interval_parts(lower, upper, truth, alpha: float):
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    lo, hi = _pair(lower, upper)
    _, y = _pair(lo, truth)
    if np.any(lo > hi):
        raise ValueError(f"crossed interval at position {int(np.argmax(lo > hi))}")
    width = hi - lo
    penalty = (2.0 / alpha) * (np.maximum(lo - y, 0.0) + np.maximum(y - hi, 0.0))
    return width, penalty, (lo <= y) & (y <= hi)


def interval_score(lower, upper, truth, alpha: float = 0.1) -> float:
    """Mean of ``(U - L) + (2 / alpha) * [(L - y)_+ + (y - U)_+]``."""
    width, penalty, _ = _interval_parts(lower, upper, truth, alpha)
    return _mean(width + penalty)


def coverage(lower, upper, truth) -> float:
    lo, hi = _pair(lower, upper)
    _, y = _pair(lo, truth)
    return float(np.count_nonzero((lo <= y) & (y <= hi))) / y.size


def mean_width(lower, upper) -> float:
    lo, hi = _pair(lower, upper)
    return _mean(hi - lo)


def gap(method_mse: float, oracle_mse: float) -> float:
    """Excess MSE over the oracle; negative values are Monte-Carlo noise and kept as-is."""
    if not (math.isfinite(method_mse) and math.isfinite(oracle_mse)):
        raise ValueError("gap needs finite inputs")
    return method_mse - oracle_mse


@dataclass(frozen=True)
class EvalReport:
    mse: float
    n_eval: int
    interval_score: Optional[float] = None
    coverage: Optional[float] = None
    mean_width: Optional[float] = None
    gap: Optional[float] = None


def evaluate(pred, truth, interval=None, alpha: float = 0.1, oracle_mse: Optional[float] = None) -> EvalReport:
    m = mse(pred, truth)
    report = dict(mse=m, n_eval=int(np.size(truth)))
    if interval is not None:
        lo, hi = interval
        report.update(
            interval_score=interval_score(lo, hi, truth, alpha),
            coverage=coverage(lo, hi, truth),
            mean_width=mean_width(lo, hi),
        )
    if oracle_mse is not None:
        report["gap"] = gap(m, oracle_mse)
    return EvalReport(**report)
