"""Benchmark simulators, priors and their misspecified "real-world" twins.

Every simulator is a pure function of ``(theta, rng)``; the batched
``Task.simulate`` draws all random inputs before applying the
misspecification so that a shared seed gives paired well-specified and
misspecified outputs.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .tableio import read_table, write_table

TASK_IDS = ("pendulum", "sir", "cs")
PROVENANCES = ("simulated", "real")
SPLIT_ROLES = ("train", "calibration", "calibration_val", "test", "unsplit")


class PriorSupportError(ValueError):
    pass


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit child seed from a master seed and any str/int keys."""
    words = [int(master) & 0xFFFFFFFF, (int(master) >> 32) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            words.append(zlib.crc32(key.encode()))
        else:
            words.append(int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(2, np.uint64)[0] >> np.uint64(1))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# --------------------------------------------------------------------------
# pendulum

PENDULUM_TIMES = np.linspace(0.0, 10.0, 200)
PENDULUM_NOISE = 0.1


def pendulum_curve(omega0, amplitude, phase, alpha=None, noise=None) -> np.ndarray:
    """Noise-free (or noise-added) position series on the 200-point grid."""
    t = PENDULUM_TIMES
    omega0 = np.asarray(omega0, dtype=float)[..., None]
    amplitude = np.asarray(amplitude, dtype=float)[..., None]
    phase = np.asarray(phase, dtype=float)[..., None]
    x = amplitude * np.cos(omega0 * t + phase)
    if alpha is not None:
        # friction damps: exp(-alpha t), not exp(+alpha t)
        x = x * np.exp(-np.asarray(alpha, dtype=float)[..., None] * t)
    if noise is not None:
        x = x + noise
    return x


def pendulum_simulate(theta, seed, misspecified: bool = False, *, phase=None,
                      alpha=None, noise: bool = True) -> np.ndarray:
    """One pendulum series for ``theta = [omega0, A]``.

    ``phase`` and ``alpha`` override the random draws (the draws still
    happen, so the noise stream does not shift).
    """
    theta = np.asarray(theta, dtype=float).reshape(1, 2)
    x = PENDULUM.simulate(theta, _rng(seed), misspecified, phase=phase, alpha=alpha,
                          noise=noise)
    return x[0]


def pendulum_prior_sample(seed) -> np.ndarray:
    return PENDULUM.prior_sample(1, _rng(seed))[0]


# --------------------------------------------------------------------------
# SIR

SIR_POPULATION = 100_000
SIR_INITIAL_INFECTED = 10
SIR_DAYS = 365
SIR_WEEKEND_SHARE = 0.05


def sir_trajectory(theta, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Binomial-chain SIR paths, each of shape (n, SIR_DAYS + 1)."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    beta, gamma = theta[:, 0], theta[:, 1]
    if np.any(~np.isfinite(theta)) or np.any(beta < 0) or np.any(gamma <= 0):
        raise ValueError(f"SIR rates must satisfy beta >= 0, gamma > 0; got {theta.tolist()}")
    n = len(theta)
    S = np.empty((n, SIR_DAYS + 1), dtype=np.int64)
    I = np.empty_like(S)
    R = np.empty_like(S)
    S[:, 0] = SIR_POPULATION - SIR_INITIAL_INFECTED
    I[:, 0] = SIR_INITIAL_INFECTED
    R[:, 0] = 0
    p_rec = -np.expm1(-gamma)
    for day in range(SIR_DAYS):
        p_inf = -np.expm1(-beta * I[:, day] / SIR_POPULATION)
        new_inf = rng.binomial(S[:, day], p_inf)
        new_rec = rng.binomial(I[:, day], p_rec)
        S[:, day + 1] = S[:, day] - new_inf
        I[:, day + 1] = I[:, day] + new_inf - new_rec
        R[:, day + 1] = R[:, day] + new_rec
    return S, I, R


def delay_weekend_counts(series: np.ndarray, share: float = SIR_WEEKEND_SHARE) -> np.ndarray:
    """Move ``share`` of every Saturday/Sunday count to the following Monday.

    Day index 0 is a Monday. Weekend counts whose Monday falls past the
    horizon are left in place.
    """
    out = np.array(series, dtype=float, copy=True)
    days = out.shape[-1]
    for d in range(days):
        if d % 7 in (5, 6):
            monday = d + (7 - d % 7)
            if monday < days:
                moved = share * series[..., d]
                out[..., d] -= moved
                out[..., monday] += moved
    return out


def sir_summaries(series: np.ndarray) -> np.ndarray:
    """Six statistics of daily infection series, shape (n, 365) -> (n, 6).

    mean, median, max, argmax day, day half of the cumulative total is
    reached, lag-1 autocorrelation. Days are counted from 1.
    """
    x = np.atleast_2d(np.asarray(series, dtype=float))
    total = x.sum(axis=1)
    csum = np.cumsum(x, axis=1)
    half_day = np.argmax(csum >= 0.5 * total[:, None], axis=1) + 1.0
    dev = x - x.mean(axis=1, keepdims=True)
    var = np.sum(dev * dev, axis=1)
    cov = np.sum(dev[:, 1:] * dev[:, :-1], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        acf = np.where(var > 0, cov / np.where(var > 0, var, 1.0), 0.0)
    return np.column_stack([
        x.mean(axis=1),
        np.median(x, axis=1),
        x.max(axis=1),
        np.argmax(x, axis=1) + 1.0,
        half_day,
        acf,
    ])


def sir_simulate(theta, seed, misspecified: bool = False) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(1, 2)
    return SIR.simulate(theta, _rng(seed), misspecified, check_support=False)[0]


# --------------------------------------------------------------------------
# cancer / stromal cells

CS_DAUGHTER_SIGMA = 0.02
CS_REMOVAL_RADIUS = 0.01
CS_EMPTY_DISTANCE = math.sqrt(2.0)


def cs_statistics(cancer: np.ndarray, stromal: np.ndarray) -> np.ndarray:
    """[#cancer, #stromal, mean, max] of stromal-to-nearest-cancer distances."""
    cancer = np.asarray(cancer, dtype=float).reshape(-1, 2)
    stromal = np.asarray(stromal, dtype=float).reshape(-1, 2)
    if len(stromal) == 0:
        mean_d = max_d = 0.0
    elif len(cancer) == 0:
        mean_d = max_d = CS_EMPTY_DISTANCE
    else:
        dist, _ = cKDTree(cancer).query(stromal, k=1)
        mean_d, max_d = float(dist.mean()), float(dist.max())
    return np.array([len(cancer), len(stromal), mean_d, max_d], dtype=float)


def cs_cells(theta, rng, misspecified: bool = False):
    """Draw one cell configuration; returns (cancer_xy, stromal_xy)."""
    lam_c, lam_p, lam_d = (float(v) for v in theta)
    n_parents = rng.poisson(lam_c)
    n_stromal = rng.poisson(lam_p)
    parents = rng.uniform(size=(n_parents, 2))
    stromal = rng.uniform(size=(n_stromal, 2))
    n_daughters = rng.poisson(lam_d, size=n_parents)
    offsets = rng.normal(scale=CS_DAUGHTER_SIGMA, size=(int(n_daughters.sum()), 2))
    owner = np.repeat(np.arange(n_parents), n_daughters)
    if misspecified and len(offsets):
        keep = np.hypot(offsets[:, 0], offsets[:, 1]) >= CS_REMOVAL_RADIUS
        offsets, owner = offsets[keep], owner[keep]
    daughters = parents[owner] + offsets
    return np.vstack([parents, daughters]), stromal


def cs_simulate(theta, seed, misspecified: bool = False) -> np.ndarray:
    theta = np.asarray(theta, dtype=float).reshape(1, 3)
    return CS.simulate(theta, _rng(seed), misspecified, check_support=False)[0]


# --------------------------------------------------------------------------
# tasks


@dataclass(frozen=True)
class Task:
    """A benchmark: uniform box prior plus a simulator with a misspecified twin."""

    name: str
    param_names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray
    obs_dim: int
    summary_dim: int
    nse_hidden: tuple[int, ...]
    finetune_lr: float = 1e-5

    @property
    def k(self) -> int:
        return len(self.param_names)

    @property
    def d(self) -> int:
        return self.obs_dim

    @property
    def log_volume(self) -> float:
        return float(np.sum(np.log(self.upper - self.lower)))

    def in_support(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(theta)
        return np.all((theta >= self.lower) & (theta <= self.upper), axis=1)

    def check_support(self, theta: np.ndarray) -> None:
        bad = ~self.in_support(theta)
        if bad.any():
            raise PriorSupportError(f"{self.name}: theta outside prior support "
                                    f"{np.atleast_2d(theta)[bad][0].tolist()}")

    def prior_sample(self, n: int, rng, box=None) -> np.ndarray:
        lo, hi = (self.lower, self.upper) if box is None else box
        return _rng(rng).uniform(lo, hi, size=(n, self.k))

    def prior_log_prob(self, theta) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        return np.where(self.in_support(theta), -self.log_volume, -np.inf)

    def simulate(self, theta, rng, misspecified: bool = False, **kw) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class PendulumTask(Task):
    def simulate(self, theta, rng, misspecified=False, *, phase=None, alpha=None,
                 noise=True, check_support=True):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if check_support:
            self.check_support(theta)
        rng = _rng(rng)
        n = len(theta)
        phi = rng.uniform(-np.pi, np.pi, size=n)
        a = rng.uniform(0.0, 1.0, size=n)
        eps = rng.normal(scale=PENDULUM_NOISE, size=(n, len(PENDULUM_TIMES)))
        if phase is not None:
            phi = np.broadcast_to(np.asarray(phase, dtype=float), (n,))
        if alpha is not None:
            a = np.broadcast_to(np.asarray(alpha, dtype=float), (n,))
        return pendulum_curve(theta[:, 0], theta[:, 1], phi,
                              alpha=a if misspecified else None,
                              noise=eps if noise else None)


@dataclass(frozen=True)
class SIRTask(Task):
    def simulate(self, theta, rng, misspecified=False, *, check_support=True):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if check_support:
            self.check_support(theta)
        _, I, _ = sir_trajectory(theta, _rng(rng))
        series = I[:, 1:].astype(float)
        if misspecified:
            series = delay_weekend_counts(series)
        return sir_summaries(series)


@dataclass(frozen=True)
class CSTask(Task):
    def simulate(self, theta, rng, misspecified=False, *, check_support=True):
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if check_support:
            self.check_support(theta)
        if np.any(theta[:, :2] <= 0) or np.any(theta[:, 2] < 0):
            raise ValueError("CS rates must satisfy lambda_c, lambda_p > 0 and lambda_d >= 0")
        rng = _rng(rng)
        out = np.empty((len(theta), 4))
        for i, th in enumerate(theta):
            out[i] = cs_statistics(*cs_cells(th, rng, misspecified))
        return out


PENDULUM = PendulumTask(
    name="pendulum", param_names=("omega0", "A"),
    lower=np.array([0.0, 0.5]), upper=np.array([3.0, 10.0]),
    obs_dim=200, summary_dim=10, nse_hidden=(256, 128, 32), finetune_lr=1e-5,
)
SIR = SIRTask(
    name="sir", param_names=("beta", "gamma"),
    lower=np.array([0.05, 0.02]), upper=np.array([0.5, 0.25]),
    obs_dim=6, summary_dim=5, nse_hidden=(8, 32, 32, 24), finetune_lr=1e-4,
)
CS = CSTask(
    name="cs", param_names=("lambda_c", "lambda_p", "lambda_d"),
    lower=np.array([5.0, 50.0, 0.0]), upper=np.array([50.0, 500.0, 10.0]),
    obs_dim=4, summary_dim=4, nse_hidden=(12, 48, 48, 36), finetune_lr=1e-4,
)
TASKS: dict[str, Task] = {t.name: t for t in (PENDULUM, SIR, CS)}


def get_task(name: str) -> Task:
    try:
        return TASKS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; expected one of {sorted(TASKS)}") from None


# --------------------------------------------------------------------------
# datasets


@dataclass
class LabeledDataset:
    """(theta, x) pairs for one task and one provenance."""

    task: str
    provenance: str
    theta: np.ndarray
    x: np.ndarray
    split_role: str = "unsplit"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if len(self.theta) != len(self.x):
            raise ValueError(f"{len(self.theta)} thetas but {len(self.x)} observations")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        if self.split_role not in SPLIT_ROLES:
            raise ValueError(f"split_role must be one of {SPLIT_ROLES}")

    def __len__(self) -> int:
        return len(self.theta)

    @property
    def k(self) -> int:
        return self.theta.shape[1]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def subset(self, idx, split_role: str | None = None) -> LabeledDataset:
        idx = np.asarray(idx, dtype=int)
        return replace(self, theta=self.theta[idx], x=self.x[idx],
                       split_role=split_role or self.split_role, meta=dict(self.meta))

    def save(self, path) -> None:
        header = {"kind": "dataset", "task_id": self.task, "provenance": self.provenance,
                  "split_role": self.split_role, "k": self.k, "d": self.d, "n": len(self),
                  "seed": int(self.seed)}
        write_table(path, header, np.hstack([self.theta, self.x]) if len(self) else
                    np.zeros((0, self.k + self.d)))

    @classmethod
    def load(cls, path) -> LabeledDataset:
        header, table = read_table(path)
        k, d = header["k"], header["d"]
        table = table.reshape(header["n"], k + d)
        return cls(task=header["task_id"], provenance=header["provenance"],
                   theta=table[:, :k].reshape(-1, k), x=table[:, k:].reshape(-1, d),
                   split_role=header.get("split_role", "unsplit"), seed=header["seed"])


def generate_dataset(task: Task | str, n: int, seed: int, *, provenance: str = "real",
                     box=None) -> LabeledDataset:
    """``n`` prior draws pushed through the (mis)specified simulator."""
    task = get_task(task) if isinstance(task, str) else task
    rng = np.random.default_rng(seed)
    theta = task.prior_sample(n, rng, box=box)
    x = task.simulate(theta, rng, misspecified=(provenance == "real"))
    return LabeledDataset(task.name, provenance, theta, x, seed=seed)


def make_splits(real: LabeledDataset, n_calibration: int, seed: int,
                n_test: int | None = None):
    """Disjoint (calibration, calibration_val, test) index split.

    Of the ``n_calibration`` pairs, ``n_calibration // 5`` go to validation
    and the rest to fine-tuning. ``n_test`` defaults to everything left.
    """
    n = len(real)
    if n_calibration < 0:
        raise ValueError("n_calibration must be non-negative")
    if n_test is None:
        n_test = n - n_calibration
    if n_calibration + n_test > n or n_test < 0:
        raise ValueError(f"cannot take {n_calibration} calibration + {n_test} test pairs "
                         f"from {n} without overlap")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = n_calibration // 5
    cal_idx = perm[: n_calibration - n_val]
    val_idx = perm[n_calibration - n_val: n_calibration]
    test_idx = perm[n_calibration: n_calibration + n_test]
    return (real.subset(cal_idx, "calibration"), real.subset(val_idx, "calibration_val"),
            real.subset(test_idx, "test"))
