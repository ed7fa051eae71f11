"""Run every config in configs/ (or the ones named on the command line)."""

import argparse
import sys
import time
from pathlib import Path

from rcp.harness import load_config, run_experiment

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("configs", nargs="*", type=Path)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--reps", type=int, help="override the repetition count, e.g. for a quick look")
    args = p.parse_args()
    paths = args.configs or sorted((ROOT / "configs").glob("*.cfg"))
    failed = False
    for path in paths:
        overrides = {"workers": str(args.workers)}
        if args.reps:
            overrides["reps"] = str(args.reps)
        cfg = load_config(path, overrides)
        start = time.perf_counter()
        res = run_experiment(cfg)
        failed |= res.failed
        print(f"{path.name}: {len(res.rows)} rows in {time.perf_counter() - start:.0f}s -> {res.output_dir}")
    return 3 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
