"""Command line entry point: ``rcp experiment run``, ``rcp predict``, ``rcp generate``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from rcp.core import VARIANTS, PipelineParams, RetrospectivePredictor, uses_correction
from rcp.data import CsvSchema, DataError, load_csv, write_csv, write_metadata
from rcp.dgp import COPULAS, MARGINALS, SyntheticSpec, gen_synthetic
from rcp.forest import ForestParams
from rcp.harness import ConfigError, fmt, load_config, run_experiment

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CELLS = 0, 1, 2, 3

PREDICT_COLUMNS = (
    "row", "rho", "t", "y_obs", "point", "lower", "upper", "lower_ci", "upper_ci",
    "lambda", "corrected", "clamped",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma separated list of numbers: {text!r}") from None


def _min_leaf(text: str):
    return text if text == "auto" else int(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rcp", description="Counterfactual prediction conditioned on the factual outcome.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    exp = sub.add_parser("experiment", help="run a simulation grid")
    exp_sub = exp.add_subparsers(dest="action", required=True, parser_class=_Parser)
    run = exp_sub.add_parser("run", help="run the grid described by a key=value config file")
    run.add_argument("config")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
    run.add_argument("--workers", type=int)
    run.add_argument("--output-dir")

    pr = sub.add_parser("predict", help="fit on a training CSV and predict counterfactuals for a query CSV")
    pr.add_argument("--train", required=True)
    pr.add_argument("--query", required=True)
    pr.add_argument("--rho", type=float)
    pr.add_argument("--rho-grid", type=_float_list)
    pr.add_argument("--variant", choices=VARIANTS, default="auto")
    pr.add_argument("--lambda-one", action="store_true", help="force the width ratio to 1")
    pr.add_argument("--alpha", type=float, default=0.1)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--bootstrap-b", type=int, default=100)
    pr.add_argument("--n-trees", type=int, default=200)
    pr.add_argument("--min-leaf", type=_min_leaf, default="auto")
    pr.add_argument("--x-cols", required=True, type=lambda s: [c.strip() for c in s.split(",") if c.strip()])
    pr.add_argument("--t-col", required=True)
    pr.add_argument("--y-col", required=True)
    pr.add_argument("--cf-col")
    pr.add_argument("--out", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset with its counterfactuals")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--d", type=int, default=1)
    gen.add_argument("--rho", type=float, required=True)
    gen.add_argument("--marginal", choices=MARGINALS, default="gaussian")
    gen.add_argument("--copula", choices=COPULAS, default="gaussian")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    return p


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        k, sep, v = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[k.strip()] = v.strip()
    return out


def cmd_experiment(args) -> int:
    overrides = _overrides(args.set)
    if args.workers is not None:
        overrides["workers"] = str(args.workers)
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, DataError) as exc:
        raise UsageError(str(exc)) from None
    result = run_experiment(cfg)
    n_failed = sum(1 for r in result.rows if r["error"])
    print(f"wrote {len(result.rows)} rows to {result.output_dir / 'results.csv'}")
    if n_failed:
        print(f"{n_failed} cell repetitions failed; see the error column", file=sys.stderr)
        return EXIT_CELLS
    return EXIT_OK


def cmd_predict(args) -> int:
    if args.rho is None and not args.rho_grid:
        raise UsageError("predict needs --rho or --rho-grid")
    rhos = args.rho_grid if args.rho_grid else [args.rho]
    if any(not -1.0 <= r <= 1.0 for r in rhos):
        raise UsageError("rho values must lie in [-1, 1]")
    if not 0.0 < args.alpha < 1.0:
        raise UsageError("--alpha must lie in (0, 1)")
    if args.bootstrap_b < 1:
        raise UsageError("--bootstrap-b must be positive")

    train = load_csv(args.train, CsvSchema(args.x_cols, args.t_col, args.y_col))
    query = load_csv(args.query, CsvSchema(args.x_cols, args.t_col, args.y_col, args.cf_col))
    params = PipelineParams(
        alpha=args.alpha,
        forest=ForestParams(n_trees=args.n_trees, min_leaf=args.min_leaf, seed=args.seed),
        seed=args.seed,
        lambda_one=args.lambda_one,
    )
    model = RetrospectivePredictor(params).fit(train)
    x, y, t = query.covariates, query.outcome, query.treatment
    widths = model.widths(x)
    # bootstrap once; the replicates do not depend on rho
    needs_ci = any(uses_correction(args.variant, r).item() for r in rhos)
    replicates = model.bootstrap(x, args.bootstrap_b) if needs_ci else None
    columns = PREDICT_COLUMNS + (("y_cf",) if args.cf_col else ())
    lines = [",".join(columns)]
    for rho in rhos:
        pred = model.predict(x, y, t, rho, args.variant, args.bootstrap_b, widths=widths, replicates=replicates)
        lo, hi = pred.interval
        corrected = pred.corrected_interval is not None
        ci_lo, ci_hi = pred.corrected_interval if corrected else (lo, hi)
        for i in range(query.n):
            row = [
                i, rho, int(t[i]), y[i], pred.point[i], lo[i], hi[i],
                ci_lo[i] if corrected else None, ci_hi[i] if corrected else None,
                pred.lam[i], corrected, bool(pred.clamped[i]),
            ]
            if args.cf_col:
                row.append(query.counterfactual_truth[i])
            lines.append(",".join(fmt(v) for v in row))
    Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_generate(args) -> int:
    try:
        spec = SyntheticSpec.from_seed(args.n, args.d, args.rho, args.seed, marginal=args.marginal, copula=args.copula)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sample = gen_synthetic(spec)
    write_csv(sample.dataset, args.out)
    meta = spec.metadata()
    meta["seed"] = args.seed
    write_metadata(str(args.out) + ".meta", meta)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"experiment": cmd_experiment, "predict": cmd_predict, "generate": cmd_generate}
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"rcp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError) as exc:
        print(f"rcp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
