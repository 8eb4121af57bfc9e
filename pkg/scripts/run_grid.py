"""Run a benchmark grid and print per-method means over repetitions.

    python scripts/run_grid.py --config acceptance --out results-acceptance
"""

import argparse
import logging
from collections import defaultdict
from dataclasses import replace

import numpy as np

from rope.experiment import ExperimentConfig, read_results, run_experiment


def summarise(rows) -> None:
    groups = defaultdict(list)
    for r in rows:
        groups[(r["method"], int(r["n_calibration"]), r["gamma"], r["tau"])].append(r)
    print(f"{'method':<12} {'n_c':>5} {'gamma':>6} {'tau':>5} {'LPP':>10} {'ACAUC':>8} reps")
    for (method, n, gamma, tau), rs in sorted(groups.items(), key=str):
        gamma, tau = ("NA" if v is None else f"{float(v):g}" for v in (gamma, tau))
        lpp = np.mean([float(r["lpp"]) for r in rs])
        acauc = np.mean([float(r["acauc"]) for r in rs])
        print(f"{method:<12} {n:>5} {gamma:>6} {tau:>5} {lpp:>10.3f} {acauc:>+8.3f} {len(rs)}")


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default="acceptance")
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--summarise-only", action="store_true", help="read an existing results.tsv")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig.load(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if args.seed is not None:
        cfg = replace(cfg, master_seed=args.seed)
    if not args.summarise_only:
        run_experiment(cfg)
    summarise(read_results(f"{cfg.output_dir}/results.tsv"))


if __name__ == "__main__":
    main()
