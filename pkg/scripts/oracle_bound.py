"""Upper bound on the LPP any mixture over the simulation posteriors can reach.

For each test point the mixture density is at most its best component, so
mean_i max_j log p(theta_i | x_s^j) bounds the RoPE LPP from above
regardless of the transport weights. Prints the bound for several n_s.
"""

import argparse

import numpy as np

from rope import core
from rope.experiment import ExperimentConfig, _Repetition
from rope.simulators import derive_seed


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--sizes", type=int, nargs="+", default=[500, 1000, 2000, 5000])
    args = p.parse_args()
    state = _Repetition(ExperimentConfig.load("acceptance"), 0)
    lp_prior = -np.log(np.prod(state.task.upper - state.task.lower))
    print(f"prior LPP {lp_prior:.3f}; target for RoPE at n_c=50 is {lp_prior + 0.3:.3f}")
    for n_s in args.sizes:
        sims = core.simulate_from_prior(state.task, n_s, derive_seed(0, "bound", n_s))
        grid = state.flow.log_prob_grid(state.test.theta, state.flow.summary(sims.x))
        best = np.max(grid, axis=1)
        print(f"n_s={n_s:>5}: best-component bound {best.mean():.3f}, "
              f"equal-weight mixture {np.mean(np.logaddexp.reduce(grid, axis=1) - np.log(n_s)):.3f}")


if __name__ == "__main__":
    main()
