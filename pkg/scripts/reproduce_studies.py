#!/usr/bin/env python3
"""Run every simulation study and write the per-figure CSV grids.

Desk-scale by default (replicate counts one tenth of the full study);
pass --full for the full counts.  Each experiment writes
<outdir>/<experiment>.csv plus a .manifest.json recording the exact
configuration, seed, and wall time.
"""

import argparse
import pathlib
import sys

from spatialscale.experiments import EXPERIMENTS, ExperimentSpec, run_experiment


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--outdir", default="results", type=pathlib.Path)
    parser.add_argument("--seed", type=int, default=20260824)
    parser.add_argument("--jobs", type=int, default=4)
    parser.add_argument("--full", action="store_true", help="full replicate counts")
    parser.add_argument(
        "--only", choices=EXPERIMENTS, action="append",
        help="run a subset (repeatable)",
    )
    args = parser.parse_args()

    args.outdir.mkdir(parents=True, exist_ok=True)
    experiments = args.only or list(EXPERIMENTS)
    for name in experiments:
        spec = ExperimentSpec(
            name, seed=args.seed, full=args.full, jobs=args.jobs
        )
        print(f"[{name}] n_sims={spec.n_sims} jobs={spec.jobs} ...", flush=True)
        result = run_experiment(spec)
        csv_path = args.outdir / f"{name}.csv"
        result.write(csv_path, args.outdir / f"{name}.manifest.json")
        print(f"[{name}] {len(result.rows)} rows -> {csv_path} ({result.wall_time:.1f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
