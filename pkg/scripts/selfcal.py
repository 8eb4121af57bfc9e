"""Self-calibration check of balanced RoPE on the pendulum task.

Compares stratified and iid simulation parameters; the pooled mixture
samples should match the prior marginals.
"""

import argparse
from dataclasses import replace

from rope.experiment import ExperimentConfig, _Repetition, self_calibration


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--n-obs", type=int, default=2000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    flow = _Repetition(replace(ExperimentConfig.load("acceptance")), 0).flow
    for stratified in (True, False):
        for seed in args.seeds:
            rep = self_calibration(flow, "pendulum", n_o=args.n_obs, seed=seed,
                                   stratified=stratified)
            kind = "LHS" if stratified else "iid"
            print(f"{kind} seed {seed}: KS {[round(k, 4) for k in rep.ks]} "
                  f"column error {rep.col_error:.1e}")


if __name__ == "__main__":
    main()
