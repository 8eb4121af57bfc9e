"""Command-line entry point: ``rope <subcommand> [flags]``.

The only environment variable read is ``ROPE_NUM_THREADS``, which caps the
BLAS thread pools; it has to be applied before numpy is imported.
"""

from __future__ import annotations

import os

_threads = os.environ.get("ROPE_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = _threads

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .autodiff import ShapeError  # noqa: E402


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_default: str | None = None) -> None:
    p.add_argument("--task", default="pendulum", choices=["pendulum", "sir", "cs"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=out_default)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    p.add_argument("--config", default=None,
                   help="preset name (default, smoke, acceptance, prior-probe) or YAML file")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rope", description="Robust posterior estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a labelled dataset")
    _common(p, "dataset.tbl")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--provenance", choices=["real", "simulated"], default="real")

    p = sub.add_parser("train-npe", help="train the statistic network and flow")
    _common(p, "npe.flow")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("finetune", help="fine-tune the statistic network on calibration pairs")
    _common(p, "g.nse")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--calibration", required=True, help="dataset file of real pairs")
    p.add_argument("--n-calibration", type=int, default=None,
                   help="use only the first N pairs of the calibration file")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("couple", help="solve the semi-balanced OT problem on saved summaries")
    _common(p, "coupling.tbl")
    p.add_argument("--real", required=True, help=".npy array (n_o, l) of observation summaries")
    p.add_argument("--sim", required=True, help=".npy array (n_s, l) of simulation summaries")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=1.0)

    p = sub.add_parser("eval", help="LPP / ACAUC of saved posterior draws")
    _common(p)
    p.add_argument("--samples", required=True, help=".npy array (n, M, k) of posterior draws")
    p.add_argument("--test", required=True, help="dataset file holding the true parameters")
    p.add_argument("--log-prob", default=None, help=".npy array (n,) of log p(theta_i | x_i)")

    p = sub.add_parser("experiment", help="run the benchmark grid")
    _common(p)
    p.add_argument("--gamma", type=float, action="append", default=None)
    p.add_argument("--tau", type=float, action="append", default=None)
    p.add_argument("--n-calibration", type=int, action="append", default=None)

    p = sub.add_parser("selfcal", help="marginal self-calibration diagnostic")
    _common(p)
    p.add_argument("--checkpoint", default=None, help="flow checkpoint; trained if omitted")
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--n-obs", type=int, default=2000)
    p.add_argument("--n-sims", type=int, default=None)
    p.add_argument("--n-pooled", type=int, default=100_000)
    p.add_argument("--iid-sims", action="store_true",
                   help="draw simulation parameters iid instead of Latin hypercube")
    return parser


def _load_config(args):
    from .experiment import ExperimentConfig

    cfg = ExperimentConfig.load(args.config or "default")
    return replace(cfg, task=args.task)


def _flow_for(args, cfg):
    from .experiment import get_npe
    from .npe import FlowModel, TrainConfig
    from .simulators import derive_seed

    if getattr(args, "checkpoint", None):
        return FlowModel.load(args.checkpoint)
    tc = TrainConfig(**{**cfg.npe, "seed": derive_seed(args.seed, "npe")})
    return get_npe(args.task, tc, cfg.cache_dir)


def cmd_simulate(args) -> int:
    from .simulators import generate_dataset

    ds = generate_dataset(args.task, args.n, args.seed, provenance=args.provenance)
    ds.save(args.out)
    print(f"wrote {len(ds)} {args.provenance} {args.task} pairs to {args.out}")
    return 0


def cmd_train_npe(args) -> int:
    from .npe import TrainConfig, train_npe

    cfg = _load_config(args)
    npe = dict(cfg.npe, seed=args.seed)
    if args.steps is not None:
        npe["max_steps"] = args.steps
    model = train_npe(args.task, TrainConfig(**npe))
    model.save(args.out)
    print(f"best validation log-prob {model.info['best_val_log_prob']:.4f}; wrote {args.out}")
    return 0


def cmd_finetune(args) -> int:
    from .core import FineTuneConfig, finetune_nse
    from .npe import FlowModel
    from .simulators import LabeledDataset, get_task, make_splits

    cfg = _load_config(args)
    task = get_task(args.task)
    flow = FlowModel.load(args.checkpoint)
    data = LabeledDataset.load(args.calibration)
    n = len(data) if args.n_calibration is None else args.n_calibration
    cal, val, _ = make_splits(data, n, args.seed, n_test=0)
    ft = FineTuneConfig(learning_rate=args.lr or cfg.finetune_lr or task.finetune_lr,
                        steps=args.steps or cfg.finetune_steps, mc_samples=cfg.mc_samples,
                        seed=args.seed)
    g = finetune_nse(flow, cal, task, ft, validation=val)
    g.save(args.out)
    print(f"validation loss {g.info['initial_val_loss']:.6g} -> {g.info['best_val_loss']:.6g}; "
          f"wrote {args.out}")
    return 0


def cmd_couple(args) -> int:
    from .core import cost_from_summaries
    from .ot import sinkhorn_semibalanced

    real, sim = np.load(args.real), np.load(args.sim)
    coupling = sinkhorn_semibalanced(cost_from_summaries(real, sim), args.gamma, args.tau)
    coupling.save(args.out)
    print(json.dumps(coupling.diagnostics(), sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .metrics import acauc_from_samples, lpp_from_values
    from .simulators import LabeledDataset

    test = LabeledDataset.load(args.test)
    samples = np.load(args.samples)
    out = {"acauc": acauc_from_samples(samples, test.theta), "n": len(test)}
    if args.log_prob:
        out.update({f"lpp_{k}": v for k, v in asdict(lpp_from_values(np.load(args.log_prob))).items()})
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    from .experiment import run_experiment

    cfg = _load_config(args)
    overrides = {"master_seed": args.seed}
    if args.gamma:
        overrides["gammas"] = args.gamma
    if args.tau:
        overrides["taus"] = args.tau
    if args.n_calibration:
        overrides["calibration_sizes"] = args.n_calibration
    if args.out:
        overrides["output_dir"] = args.out
    cfg = replace(cfg, **overrides)
    rows = run_experiment(cfg)
    print(f"{len(rows)} result rows written to {Path(cfg.output_dir) / 'results.tsv'}")
    return 0


def cmd_selfcal(args) -> int:
    from .experiment import self_calibration

    cfg = _load_config(args)
    flow = _flow_for(args, cfg)
    rep = self_calibration(flow, args.task, n_o=args.n_obs, n_s=args.n_sims, gamma=args.gamma,
                           tau=args.tau, n_pooled=args.n_pooled, seed=args.seed,
                           stratified=not args.iid_sims)
    for name, ks in zip(flow_param_names(args.task), rep.ks):
        print(f"KS[{name}] = {ks:.5f}")
    print(f"max |column sum - 1/n_s| = {rep.col_error:.3e}")
    return 0


def flow_param_names(task: str) -> tuple:
    from .simulators import get_task

    return get_task(task).param_names


COMMANDS = {"simulate": cmd_simulate, "train-npe": cmd_train_npe, "finetune": cmd_finetune,
            "couple": cmd_couple, "eval": cmd_eval, "experiment": cmd_experiment,
            "selfcal": cmd_selfcal}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, ShapeError, FileNotFoundError, KeyError) as exc:
        parser.print_usage(sys.stderr)
        print(f"rope {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
