"""Experiment grids over synthetic data, written as row-level and summary CSVs.

A configuration is a plain-text ``key=value`` file (lists comma separated).
Every (cell, repetition) task is a pure function of the config, so results do
not depend on the number of worker processes.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
import math
import time
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.stats import ks_2samp

from rcp import metrics
from rcp.baselines import Matcher, MatchingParams, cate_adjusted_predict, do_predict
from rcp.core import (
    PipelineParams,
    RetrospectivePredictor,
    VARIANTS,
    c_rho,
    c_rho_plus_ci,
    mu_rho,
    oracle_interval,
    percentile_radii,
    uses_correction,
)
from rcp.data import read_metadata, write_metadata
from rcp.dgp import COPULAS, MARGINALS, SyntheticSpec, derive_seed, gen_synthetic, twin_dgp_pair
from rcp.forest import ForestParams

logger = logging.getLogger(__name__)

EXPERIMENTS = ("mse-grid", "interval-grid", "misspec-rho", "non-gauss", "nonidentifiability", "coverage-check")

RESULT_COLUMNS = (
    "experiment", "rep", "method", "rho_true", "rho_est", "n", "d", "copula", "marginal",
    "mse", "interval_score", "coverage", "mean_width", "gap", "wall_time_ms", "seed", "error",
)
METRIC_COLUMNS = ("mse", "interval_score", "coverage", "mean_width", "gap")
KS_COLUMNS = ("rep", "n", "d", "seed", "ks_p_arm0", "ks_p_arm1", "oracle_diff")

_MISSPEC, _PIPELINE, _HELDOUT, _TWIN = 0x3155, 0x919E, 0x7E57, 0x7417


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "mse-grid"
    n: tuple = (1000,)
    d: tuple = (1,)
    reps: int = 50
    alpha: float = 0.1
    rho_true_grid: tuple = (0.0, 0.5, 0.9)
    rho_est_grid: tuple = tuple(round(0.1 * i, 1) for i in range(11))
    copulas: tuple = ("gaussian",)
    marginals: tuple = ("gaussian",)
    bootstrap_B: int = 100
    interval_variant: str = "auto"
    seed: int = 0
    output_dir: str = "results"
    n_test: int = 1000
    calib_fraction: float = 0.2
    n_trees: int = 200
    min_leaf: Union[int, str] = "auto"
    matching_k: int = 5
    lambda_one: bool = False
    workers: int = 1
    timing: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        for r in self.rho_true_grid + self.rho_est_grid:
            if not -1.0 <= r <= 1.0:
                raise ConfigError(f"rho grid value {r} outside [-1, 1]")
        for c in self.copulas:
            if c not in COPULAS:
                raise ConfigError(f"unknown copula {c!r}")
        for m in self.marginals:
            if m not in MARGINALS:
                raise ConfigError(f"unknown marginal {m!r}")
        if self.interval_variant not in VARIANTS:
            raise ConfigError(f"unknown interval_variant {self.interval_variant!r}")
        if self.reps < 1 or self.n_test < 1 or self.workers < 1:
            raise ConfigError("reps, n_test and workers must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)")
        if any(v < 1 for v in self.n + self.d):
            raise ConfigError("n and d must be positive")
        try:
            self.forest_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def forest_params(self, seed: int = 0) -> ForestParams:
        return ForestParams(n_trees=self.n_trees, min_leaf=self.min_leaf, seed=seed)

    def pipeline_params(self, seed: int) -> PipelineParams:
        return PipelineParams(self.alpha, self.calib_fraction, self.forest_params(seed), seed, self.lambda_one)

    def as_items(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v).lower() if isinstance(v, bool) else str(v)
        return out


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], str):
                return tuple(items)
            if name in ("n", "d"):
                return tuple(int(s) for s in items)
            return tuple(float(s) for s in items)
        if name == "min_leaf":
            return raw if raw == "auto" else int(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def config_from_items(items: dict, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    known = {f.name for f in fields(ExperimentConfig)}
    updates = {}
    for k, v in items.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        updates[k] = _parse_value(k, v, getattr(base, k))
    return dataclasses.replace(base, **updates)


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    try:
        items = read_metadata(path)
    except FileNotFoundError:
        raise ConfigError(f"no such config file: {path}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    items.update(overrides or {})
    return config_from_items(items)


# --- tasks ------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    rho_true: float
    n: int
    d: int
    copula: str
    marginal: str

    def key(self, experiment: str) -> str:
        return f"{experiment}|{self.rho_true!r}|{self.n}|{self.d}|{self.copula}|{self.marginal}"


def cells(cfg: ExperimentConfig) -> list[Cell]:
    rhos = (0.2,) if cfg.experiment == "nonidentifiability" else cfg.rho_true_grid
    return [
        Cell(float(r), n, d, c, m)
        for r in rhos for n in cfg.n for d in cfg.d for c in cfg.copulas for m in cfg.marginals
    ]


def rep_seed(cfg: ExperimentConfig, cell: Cell, rep: int) -> int:
    return derive_seed(cfg.seed, zlib.crc32(cell.key(cfg.experiment).encode()), rep)


def _row(cfg, cell, rep, seed, method, rho_est, report=None, error="", elapsed=None) -> dict:
    row = dict(
        experiment=cfg.experiment, rep=rep, method=method, rho_true=cell.rho_true, rho_est=rho_est,
        n=cell.n, d=cell.d, copula=cell.copula, marginal=cell.marginal, seed=seed, error=error,
        wall_time_ms=elapsed if cfg.timing else None,
    )
    for k in METRIC_COLUMNS:
        row[k] = getattr(report, k) if report is not None else None
    return row


def _cap(r: float) -> float:
    return min(1.0, max(-1.0, r))


def _run_task(args) -> tuple[list[dict], list[dict]]:
    cfg, cell, rep = args
    seed = rep_seed(cfg, cell, rep)
    start = time.perf_counter()
    try:
        if cfg.experiment == "nonidentifiability":
            rows, extra = _nonidentifiability(cfg, cell, rep, seed)
        else:
            rows, extra = _synthetic_rep(cfg, cell, rep, seed), []
    except Exception as exc:  # one failed cell must not stop the grid
        logger.exception("cell %s rep %d failed", cell, rep)
        return [_row(cfg, cell, rep, seed, "*", None, error=f"{type(exc).__name__}: {exc}")], []
    elapsed = round((time.perf_counter() - start) * 1000.0, 3)
    if cfg.timing:
        for r in rows:
            r["wall_time_ms"] = elapsed
    return rows, extra


def _synthetic_rep(cfg: ExperimentConfig, cell: Cell, rep: int, seed: int) -> list[dict]:
    spec = SyntheticSpec.from_seed(cell.n, cell.d, cell.rho_true, seed, marginal=cell.marginal, copula=cell.copula)
    train = gen_synthetic(spec)
    test = gen_synthetic(spec.heldout(cfg.n_test, derive_seed(seed, _HELDOUT)))
    x, y, t = test.dataset.covariates, test.dataset.outcome, test.dataset.treatment
    truth = test.dataset.counterfactual_truth
    alpha = cfg.alpha

    params = cfg.pipeline_params(derive_seed(seed, _PIPELINE))
    model = RetrospectivePredictor(params).fit(train.dataset)
    w0, w1 = model.widths(x)
    one = cfg.lambda_one

    oracle_point = test.oracle(x, y, t)
    oracle_mse = metrics.mse(oracle_point, truth)
    rows = []

    def add(method, rho_est, point, interval=None):
        rep_ = metrics.evaluate(point, truth, interval, alpha, oracle_mse)
        rows.append(_row(cfg, cell, rep, seed, method, rho_est, rep_))

    exp = cfg.experiment
    rho = cell.rho_true
    if exp == "misspec-rho":
        for r in cfg.rho_est_grid:
            add("rcp", float(r), mu_rho(y, t, w0, w1, r, one), c_rho(y, t, w0, w1, r, one))
        add("oracle", None, oracle_point, _oracle_interval(test, x, y, t, alpha))
        return rows

    replicates = None
    if exp == "interval-grid" and cfg.bootstrap_B > 0:
        replicates = model.bootstrap(x, cfg.bootstrap_B)

    misspec = _cap(rho + np.random.default_rng(derive_seed(seed, _MISSPEC)).uniform(-0.5, 0.5))
    rcp_rhos = [("rcp", rho)]
    if exp in ("mse-grid", "interval-grid"):
        rcp_rhos.append(("rcp_misspec", misspec))
    for name, r in rcp_rhos:
        point = mu_rho(y, t, w0, w1, r, one)
        interval = c_rho(y, t, w0, w1, r, one)
        if replicates is not None and uses_correction(cfg.interval_variant, r).any():
            r_l, r_u = percentile_radii(replicates.mu_rho(y, t, r, one), point, alpha)
            interval = c_rho_plus_ci(y, t, w0, w1, r, r_l, r_u, lambda_one=one)
        add(name, r, point, interval)

    do = do_predict(model.arm0, model.arm1, x, t, widths=(w0, w1))
    add("do", None, do.point, do.interval)
    if exp in ("mse-grid", "interval-grid"):
        cate = cate_adjusted_predict(model.arm0, model.arm1, x, y, t, replicates, alpha, widths=(w0, w1))
        add("cate_adj", None, cate.point, cate.interval)
        match = Matcher(train.dataset, MatchingParams(k=cfg.matching_k, t_level=1 - alpha / 2)).predict(x, t)
        add("matching", None, match.point, match.interval)
    add("oracle", None, oracle_point, _oracle_interval(test, x, y, t, alpha))
    return rows


def _oracle_interval(sample, x, y, t, alpha):
    if sample.gaussian_oracle is None:
        return None
    return oracle_interval(sample.gaussian_oracle, x, y, t, alpha)


def _nonidentifiability(cfg: ExperimentConfig, cell: Cell, rep: int, seed: int):
    """Two specs equal in every marginal law but rho (0.2 vs 0.8), sampled independently."""
    spec_a, spec_b = twin_dgp_pair(seed, cell.n, cell.d)
    spec_b = spec_b.heldout(cell.n, derive_seed(seed, _TWIN))
    a, b = gen_synthetic(spec_a), gen_synthetic(spec_b)
    ps = []
    for arm in (0, 1):
        ya = a.dataset.outcome[a.dataset.treatment == arm]
        yb = b.dataset.outcome[b.dataset.treatment == arm]
        ps.append(float(ks_2samp(ya, yb).pvalue))
    # conditional means at y = mu0(x) + 2 for control units, on a common covariate grid
    xg = np.linspace(-1, 1, 21)[:, None] if cell.d == 1 else np.full((21, cell.d), 0.5)
    y_probe = a.f0(xg) + 2.0
    t0 = np.zeros(xg.shape[0], dtype=int)
    diff = float(np.min(np.abs(b.oracle(xg, y_probe, t0) - a.oracle(xg, y_probe, t0))))
    rows = []
    for sample in (a, b):
        ds = sample.dataset
        point = sample.oracle(ds.covariates, ds.outcome, ds.treatment)
        report = metrics.evaluate(point, ds.counterfactual_truth, None, cfg.alpha, None)
        c = dataclasses.replace(cell, rho_true=sample.spec.rho_true)
        rows.append(_row(cfg, c, rep, seed, "oracle", sample.spec.rho_true, report))
    extra = [dict(rep=rep, n=cell.n, d=cell.d, seed=seed, ks_p_arm0=ps[0], ks_p_arm1=ps[1], oracle_diff=diff)]
    return rows, extra


# --- output ---------------------------------------------------------------------


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return "nan"
        return format(float(v), ".9g")
    s = str(v)
    if any(ch in s for ch in ',"\n'):
        s = '"' + s.replace('"', '""') + '"'
    return s


def write_table(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(fmt(r.get(c)) for c in columns) + "\n")


SUMMARY_KEYS = ("experiment", "method", "rho_true", "rho_est", "n", "d", "copula", "marginal")


def summarize(rows: list[dict]) -> list[dict]:
    """Per-cell mean and standard deviation of every metric over repetitions.

    ``rcp_misspec`` draws a different rho_est each repetition, so its rows are
    pooled over rho_est.
    """
    groups: dict = {}
    for r in rows:
        if r["error"]:
            continue
        key = tuple("" if (k == "rho_est" and r["method"] == "rcp_misspec") else r[k] for k in SUMMARY_KEYS)
        groups.setdefault(key, []).append(r)
    out = []
    for key, members in groups.items():
        s = dict(zip(SUMMARY_KEYS, key))
        s["reps"] = len(members)
        for m in METRIC_COLUMNS:
            vals = [r[m] for r in members if r[m] is not None]
            if vals:
                s[m + "_mean"] = math.fsum(vals) / len(vals)
                s[m + "_sd"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            else:
                s[m + "_mean"] = s[m + "_sd"] = None
        out.append(s)
    return out


SUMMARY_COLUMNS = SUMMARY_KEYS + ("reps",) + tuple(f"{m}_{s}" for m in METRIC_COLUMNS for s in ("mean", "sd"))


@dataclass
class RunResult:
    rows: list
    summary: list
    extra: list = field(default_factory=list)
    output_dir: Optional[Path] = None

    @property
    def failed(self) -> bool:
        return any(r["error"] for r in self.rows)


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunResult:
    tasks = [(cfg, cell, rep) for cell in cells(cfg) for rep in range(cfg.reps)]
    if cfg.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_task, tasks, chunksize=1))
    else:
        results = [_run_task(t) for t in tasks]
    rows = [r for rs, _ in results for r in rs]
    extra = [e for _, es in results for e in es]
    result = RunResult(rows, summarize(rows), extra)
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "results.csv", RESULT_COLUMNS, rows)
        write_table(out / "summary.csv", SUMMARY_COLUMNS, result.summary)
        if extra:
            write_table(out / "nonidentifiability.csv", KS_COLUMNS, extra)
        meta = cfg.as_items()
        meta["note_shared_models"] = "baseline models are fit once per repetition and shared across rho_est"
        meta["note_evaluation"] = "metrics use a held-out synthetic sample of size n_test per repetition"
        write_metadata(out / "run.txt", meta)
        result.output_dir = out
    return result
