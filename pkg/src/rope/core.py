"""RoPE proper: statistic fine-tuning, OT cost, mixture posteriors, baselines."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from scipy.stats import qmc

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor
from .npe import MLP, FlowModel, fit_flow
from .ot import Coupling, CostMatrix, sinkhorn_semibalanced
from .simulators import LabeledDataset, Task, derive_seed, get_task, make_splits

log = logging.getLogger(__name__)

MIN_COMPONENT_WEIGHT = 1e-12
ROW_SUM_TOL = 1e-6


def content_hash(*arrays) -> str:
    """git-style blob hash over the raw bytes of the given arrays."""
    payload = b"".join(np.ascontiguousarray(a, dtype=float).tobytes() for a in arrays)
    h = hashlib.sha1(f"blob {len(payload)}\0".encode())
    h.update(payload)
    return h.hexdigest()


def model_hash(model: FlowModel | MLP) -> str:
    params = model.parameters()
    extra = [model.nse.shift, model.nse.scale] if isinstance(model, FlowModel) else \
        [model.shift, model.scale]
    return content_hash(*extra, *[p.data for p in params])


# --------------------------------------------------------------------------
# fine-tuning


@dataclass
class FineTuneConfig:
    learning_rate: float = 1e-5
    steps: int = 5000
    mc_samples: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.mc_samples < 1:
            raise ValueError("FineTuneConfig needs steps >= 1 and mc_samples >= 1")
        if self.learning_rate <= 0:
            raise ValueError("FineTuneConfig.learning_rate must be positive")


def summary_targets(h: MLP, task: Task, theta: np.ndarray, mc_samples: int, seed) -> np.ndarray:
    """Monte-Carlo mean of h(S(theta, eps)) over ``mc_samples`` simulator draws."""
    rng = np.random.default_rng(seed)
    theta = np.atleast_2d(theta)
    reps = np.repeat(theta, mc_samples, axis=0)
    x = task.simulate(reps, rng)
    return h(x).data.reshape(len(theta), mc_samples, -1).mean(axis=1)


def distance_loss(g: MLP, x, targets) -> Tensor:
    """sum_i |g(x_i) - target_i|_2"""
    diff = g(x) - Tensor(targets)
    return ad.sqrt(ad.square(diff).sum(axis=1)).sum()


def distance_loss_value(g: MLP, x, targets) -> float:
    if len(x) == 0:
        return 0.0
    return float(np.sum(np.linalg.norm(g(x).data - targets, axis=1)))


def finetune_nse(base: FlowModel | MLP, calibration: LabeledDataset, task: Task | str,
                 cfg: FineTuneConfig | None = None,
                 validation: LabeledDataset | None = None) -> MLP:
    """Adapt a copy of the statistic network to real observations.

    Minimises the summed L2 distance between g(x_o) and the simulated
    summary of the same parameters, starting from the NPE weights, and
    returns the iterate with the lowest validation loss. Without an
    explicit ``validation`` set the calibration pairs are split 80/20.
    With fewer than five calibration pairs there is no validation share
    and selection falls back to the training loss.
    """
    cfg = cfg or FineTuneConfig()
    task = get_task(task) if isinstance(task, str) else task
    if len(calibration) == 0:
        raise ValueError("fine-tuning needs a non-empty calibration set")
    if validation is None:
        calibration, validation, _ = make_splits(calibration, len(calibration),
                                                 derive_seed(cfg.seed, "ft-split"), n_test=0)
    h = base.nse if isinstance(base, FlowModel) else base
    g = h.copy()
    t_train = summary_targets(h, task, calibration.theta, cfg.mc_samples,
                              derive_seed(cfg.seed, "ft-targets-train"))
    t_val = summary_targets(h, task, validation.theta, cfg.mc_samples,
                            derive_seed(cfg.seed, "ft-targets-val")) if len(validation) else None

    def score() -> float:
        if t_val is None:
            return distance_loss_value(g, calibration.x, t_train)
        return distance_loss_value(g, validation.x, t_val)

    opt = Adam(g.parameters(), cfg.learning_rate)
    best_val = initial_val = score()
    best = [p.data.copy() for p in g.parameters()]
    train_curve = []
    for step in range(1, cfg.steps + 1):
        with Tape() as tape:
            loss = distance_loss(g, calibration.x, t_train)
            tape.backward(loss)
        opt.step()
        train_curve.append(loss.item())
        current = score()
        if current < best_val:
            best_val = current
            best = [p.data.copy() for p in g.parameters()]
    for p, a in zip(g.parameters(), best):
        p.data[...] = a
    g.info = {"initial_val_loss": initial_val, "best_val_loss": best_val,
              "train_curve": train_curve, "n_train": len(calibration),
              "n_val": len(validation)}
    return g


# --------------------------------------------------------------------------
# OT cost and mixture posterior


def cost_from_summaries(real_summaries, sim_summaries) -> CostMatrix:
    real_summaries = np.atleast_2d(real_summaries)
    sim_summaries = np.atleast_2d(sim_summaries)
    if real_summaries.shape[1] != sim_summaries.shape[1]:
        raise ad.ShapeError(f"summary dimension mismatch: real {real_summaries.shape[1]} vs "
                            f"simulated {sim_summaries.shape[1]}")
    return CostMatrix(cdist(real_summaries, sim_summaries), "euclidean summary distance")


def build_cost(g: MLP, h: MLP, real_x, sim_x) -> CostMatrix:
    """C_ij = |g(x_o^i) - h(x_s^j)|_2"""
    return cost_from_summaries(g(real_x).data, h(sim_x).data)


@dataclass
class MixturePosterior:
    """Per-observation mixtures of simulation-conditioned flow posteriors.

    Row ``i`` of ``weights`` holds the mixture weights for observation
    ``i``. Sampling consumes per-component banks of flow draws without
    replacement; an exhausted bank is refilled with fresh flow samples.
    Bank contents depend only on ``bank_seed``, the component and the refill
    count, so a fixed sequence of calls is reproducible.
    """

    weights: np.ndarray
    component_summaries: np.ndarray
    flow: FlowModel
    bank_size: int = 10_000
    bank_seed: int = 0
    _banks: dict = field(default_factory=dict, repr=False)
    _cursor: dict = field(default_factory=dict, repr=False)
    _refills: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        if np.any(self.weights < 0):
            raise ValueError("mixture weights must be non-negative")
        rows = self.weights.sum(axis=1)
        if np.max(np.abs(rows - 1.0)) > ROW_SUM_TOL:
            raise ValueError(f"mixture weights rows must sum to 1 (max deviation "
                             f"{np.max(np.abs(rows - 1.0)):.3g})")
        if len(self.component_summaries) != self.weights.shape[1]:
            raise ValueError("one summary per mixture component required")
        if self.bank_size < 1:
            raise ValueError("bank_size must be >= 1")

    @property
    def n_obs(self) -> int:
        return self.weights.shape[0]

    @property
    def n_components(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.flow.k

    # -- densities

    def log_prob_at(self, i: int, theta) -> np.ndarray:
        """log sum_j w_ij p(theta | s_j) for one observation and any thetas."""
        if not 0 <= i < self.n_obs:
            raise IndexError(f"observation index {i} out of range")
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        w = self.weights[i]
        active = np.flatnonzero(w >= MIN_COMPONENT_WEIGHT)
        lp = self.flow.log_prob_grid(theta, self.component_summaries[active])
        return logsumexp(lp + np.log(w[active])[None, :], axis=1)

    def log_prob(self, theta) -> np.ndarray:
        """Row-aligned: entry i is the density of observation i's mixture at theta[i]."""
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        if len(theta) != self.n_obs:
            raise ValueError(f"expected {self.n_obs} parameter rows, got {len(theta)}")
        out = np.empty(self.n_obs)
        chunk = max(1, 200_000 // self.n_components)
        mask = self.weights >= MIN_COMPONENT_WEIGHT
        logw = np.full_like(self.weights, -np.inf)
        logw[mask] = np.log(self.weights[mask])
        for start in range(0, self.n_obs, chunk):
            sl = slice(start, start + chunk)
            lp = self.flow.log_prob_grid(theta[sl], self.component_summaries)
            out[sl] = logsumexp(np.where(mask[sl], lp + logw[sl], -np.inf), axis=1)
        return out

    # -- sampling

    def _fresh(self, j: int, n: int) -> np.ndarray:
        count = self._refills.get(j, 0)
        self._refills[j] = count + 1
        u = np.random.default_rng([self.bank_seed, j, count]).standard_normal((1, n, self.k))
        return self.flow.sample_from_noise(self.component_summaries[j:j + 1], u)[0]

    def _refill(self, needs: dict[int, int]) -> None:
        # batch the common case of one standard-size bank per component
        standard = [j for j, n in needs.items() if n <= self.bank_size]
        if standard:
            us = []
            for j in standard:
                count = self._refills.get(j, 0)
                self._refills[j] = count + 1
                us.append(np.random.default_rng([self.bank_seed, j, count]).standard_normal(
                    (self.bank_size, self.k)))
            fresh = self.flow.sample_from_noise(self.component_summaries[standard], np.stack(us))
            for j, bank in zip(standard, fresh):
                self._append(j, bank)
        for j, n in needs.items():
            if n > self.bank_size:
                self._append(j, self._fresh(j, n))

    def _append(self, j: int, new: np.ndarray) -> None:
        old = self._banks.get(j)
        left = old[self._cursor[j]:] if old is not None else np.empty((0, self.k))
        self._banks[j] = np.concatenate([left, new])
        self._cursor[j] = 0

    def _draw(self, row: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        comps = rng.choice(self.n_components, size=n, p=row / row.sum())
        uniq, counts = np.unique(comps, return_counts=True)
        needs = {}
        for j, c in zip(uniq.tolist(), counts.tolist()):
            have = len(self._banks[j]) - self._cursor[j] if j in self._banks else 0
            if have < c:
                needs[j] = c - have
        if needs:
            self._refill(needs)
        parts = []
        for j, c in zip(uniq.tolist(), counts.tolist()):
            cur = self._cursor[j]
            parts.append(self._banks[j][cur:cur + c])
            self._cursor[j] = cur + c
        return np.concatenate(parts)[rng.permutation(n)]

    def sample_obs(self, i: int, n: int, seed) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return self._draw(self.weights[i], n, rng)

    def sample(self, n: int, seed) -> np.ndarray:
        """``n`` draws for every observation, shape (n_obs, n, k)."""
        if n < 1:
            raise ValueError("n must be >= 1")
        out = np.empty((self.n_obs, n, self.k))
        for i in range(self.n_obs):
            out[i] = self._draw(self.weights[i], n, np.random.default_rng([int(seed), i]))
        return out


def assemble_posterior(coupling: Coupling | np.ndarray, flow: FlowModel, sims=None, *,
                       sim_summaries=None, bank_size: int = 10_000,
                       bank_seed: int = 0) -> MixturePosterior:
    """alpha = n_o P; components are the flow posteriors of the simulations."""
    P = coupling.P if isinstance(coupling, Coupling) else np.atleast_2d(coupling)
    n_o = P.shape[0]
    rows = P.sum(axis=1)
    if np.max(np.abs(rows - 1.0 / n_o)) * n_o > ROW_SUM_TOL:
        raise ValueError(f"coupling violates the observation marginal by "
                         f"{np.max(np.abs(rows - 1.0 / n_o)):.3g}")
    if sim_summaries is None:
        if sims is None:
            raise ValueError("pass simulated observations or their summaries")
        sim_x = sims.x if isinstance(sims, LabeledDataset) else sims
        sim_summaries = flow.summary(sim_x)
    return MixturePosterior(n_o * P, np.asarray(sim_summaries, dtype=float), flow,
                            bank_size=bank_size, bank_seed=bank_seed)


def mixture_log_prob(mp: MixturePosterior, i: int, theta) -> np.ndarray:
    return mp.log_prob_at(i, theta)


def mixture_sample(mp: MixturePosterior, i: int, n: int, seed) -> np.ndarray:
    return mp.sample_obs(i, n, seed)


# --------------------------------------------------------------------------
# posterior evaluators bound to a fixed list of observations


@dataclass
class PriorPosterior:
    task: Task
    n_obs: int

    def log_prob(self, theta) -> np.ndarray:
        return self.task.prior_log_prob(theta)

    def sample(self, n: int, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return self.task.prior_sample(self.n_obs * n, rng).reshape(self.n_obs, n, self.task.k)


@dataclass
class FlowPosterior:
    """The flow conditioned on one fixed summary per observation."""

    flow: FlowModel
    summaries: np.ndarray

    @property
    def n_obs(self) -> int:
        return len(self.summaries)

    def log_prob(self, theta) -> np.ndarray:
        return self.flow.log_prob(theta, self.summaries)

    def sample(self, n: int, seed) -> np.ndarray:
        return self.flow.sample_many(self.summaries, n, seed)


@dataclass
class GaussianPosterior:
    """Independent Gaussians per dimension (the MLP baseline's output)."""

    mean: np.ndarray
    log_var: np.ndarray

    @property
    def n_obs(self) -> int:
        return len(self.mean)

    def log_prob(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        var = np.exp(self.log_var)
        return -0.5 * np.sum(np.log(2 * np.pi) + self.log_var + (theta - self.mean) ** 2 / var,
                             axis=1)

    def sample(self, n: int, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal((self.n_obs, n, self.mean.shape[1]))
        return self.mean[:, None, :] + np.exp(0.5 * self.log_var)[:, None, :] * eps


# --------------------------------------------------------------------------
# RoPE pipeline


def simulate_from_prior(task: Task, n: int, seed, *, stratified: bool = False) -> LabeledDataset:
    """Step 3 simulations. ``stratified`` uses a Latin hypercube over the box."""
    rng = np.random.default_rng(seed)
    if stratified:
        unit = qmc.LatinHypercube(d=task.k, seed=rng).random(n)
        theta = task.lower + unit * (task.upper - task.lower)
    else:
        theta = task.prior_sample(n, rng)
    x = task.simulate(theta, rng)
    return LabeledDataset(task.name, "simulated", theta, x, seed=int(seed) if np.isscalar(seed) else 0)


@dataclass
class RopeResult:
    posterior: MixturePosterior
    coupling: Coupling
    g: MLP
    sims: LabeledDataset
    provenance: dict


def rope_posterior(flow: FlowModel, task: Task | str, test_x: np.ndarray, *,
                   g: MLP | None = None, gamma: float = 0.5, tau: float = 1.0,
                   n_sims: int | None = None, sim_seed: int = 0, stratified: bool = False,
                   sims: LabeledDataset | None = None, sim_summaries=None,
                   bank_size: int = 10_000, max_iters: int = 10_000,
                   tol: float = 1e-9) -> RopeResult:
    """Steps 3-5: simulate, couple in summary space, assemble the mixture.

    ``g`` defaults to the NPE statistic network itself (the OT-only
    ablation). Pass ``sims`` (and optionally their cached summaries) to
    share one simulation set between several couplings.
    """
    task = get_task(task) if isinstance(task, str) else task
    g = g or flow.nse
    n_o = len(test_x)
    if sims is None:
        n_s = n_o if n_sims is None else n_sims
        if n_s < n_o:
            raise ValueError(f"n_s = {n_s} simulations for {n_o} observations; need n_s >= n_o")
        sims = simulate_from_prior(task, n_s, sim_seed, stratified=stratified)
    n_s = len(sims)
    if sim_summaries is None:
        sim_summaries = flow.summary(sims.x)
    cost = cost_from_summaries(g(test_x).data, sim_summaries)
    coupling = sinkhorn_semibalanced(cost, gamma, tau, max_iters=max_iters, tol=tol)
    if not coupling.converged:
        log.warning("Sinkhorn stopped after %d iterations (row error %.2e)",
                    coupling.iterations, coupling.marginal_error)
    posterior = assemble_posterior(coupling, flow, sim_summaries=sim_summaries,
                                   bank_size=bank_size, bank_seed=derive_seed(sim_seed, "banks"))
    provenance = {
        "gamma": gamma, "tau": tau, "n_o": n_o, "n_s": n_s, "sim_seed": int(sim_seed),
        "stratified_sims": stratified, "flow_hash": model_hash(flow), "g_hash": model_hash(g),
        "sims_hash": content_hash(sims.theta, sims.x), "test_hash": content_hash(test_x),
        "coupling": coupling.diagnostics(),
    }
    return RopeResult(posterior, coupling, g, sims, provenance)


def run_rope(task: Task | str, calibration: LabeledDataset, test: LabeledDataset,
             flow: FlowModel, *, gamma: float = 0.5, tau: float = 1.0,
             finetune: FineTuneConfig | None = None, seed: int = 0,
             validation: LabeledDataset | None = None, skip_finetune: bool = False,
             n_sims: int | None = None, stratified: bool = False,
             bank_size: int = 10_000) -> RopeResult:
    """The full procedure given a trained NPE (step 1).

    Step 2 fine-tunes the statistic network on ``calibration`` (selecting
    on ``validation``), then :func:`rope_posterior` runs steps 3-5 with the
    test observations.
    """
    task = get_task(task) if isinstance(task, str) else task
    ft = finetune or FineTuneConfig(learning_rate=task.finetune_lr,
                                    seed=derive_seed(seed, "finetune"))
    if skip_finetune:
        g = flow.nse
    else:
        g = finetune_nse(flow, calibration, task, ft, validation=validation)
    result = rope_posterior(flow, task, test.x, g=g, gamma=gamma, tau=tau, n_sims=n_sims,
                            sim_seed=derive_seed(seed, "sims"), stratified=stratified,
                            bank_size=bank_size)
    result.provenance.update({
        "task": task.name, "seed": int(seed), "n_calibration": len(calibration) +
        (len(validation) if validation is not None else 0),
        "finetune": None if skip_finetune else asdict(ft),
        "finetune_val_loss": None if skip_finetune else (g.info["initial_val_loss"],
                                                         g.info["best_val_loss"]),
        "calibration_hash": content_hash(calibration.theta, calibration.x),
    })
    return result


def tuning_only(flow: FlowModel, g: MLP, test_x) -> FlowPosterior:
    """Fine-tuned statistics fed straight into the flow, no transport."""
    return FlowPosterior(flow, g(test_x).data)


# --------------------------------------------------------------------------
# baselines


def baseline_prior(task: Task | str, test: LabeledDataset) -> PriorPosterior:
    task = get_task(task) if isinstance(task, str) else task
    return PriorPosterior(task, len(test))


def baseline_npe_direct(flow: FlowModel, test: LabeledDataset) -> FlowPosterior:
    return FlowPosterior(flow, flow.summary(test.x))


def sbi_reference(flow: FlowModel, task: Task | str, test_theta, seed: int = 0) -> FlowPosterior:
    """Simulate a synthetic twin for each test label and apply the NPE to it."""
    task = get_task(task) if isinstance(task, str) else task
    rng = np.random.default_rng(seed)
    x = task.simulate(np.atleast_2d(test_theta), rng)
    return FlowPosterior(flow, flow.summary(x))


@dataclass
class JNPEConfig:
    steps: int = 2000
    learning_rate: float = 5e-4
    batch_size: int = 100
    real_fraction: float = 0.5
    val_interval: int = 100
    seed: int = 0


def jnpe_batch(task: Task, calibration: LabeledDataset, batch_size: int, real_fraction: float,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mixed batch; returns (theta, x, is_real)."""
    n_real = int(round(batch_size * real_fraction))
    idx = rng.integers(0, len(calibration), size=n_real)
    theta_s = task.prior_sample(batch_size - n_real, rng)
    x_s = task.simulate(theta_s, rng)
    theta = np.vstack([calibration.theta[idx], theta_s])
    x = np.vstack([calibration.x[idx], x_s])
    is_real = np.r_[np.ones(n_real, bool), np.zeros(batch_size - n_real, bool)]
    return theta, x, is_real


def baseline_jnpe(flow: FlowModel, task: Task | str, calibration: LabeledDataset,
                  validation: LabeledDataset, test: LabeledDataset,
                  cfg: JNPEConfig | None = None) -> FlowPosterior:
    """NPE re-fitted on half-simulated, half-calibration batches.

    Warm-started from the simulation-trained flow; the returned iterate
    maximises the calibration-validation log-prob.
    """
    task = get_task(task) if isinstance(task, str) else task
    cfg = cfg or JNPEConfig()
    if len(calibration) == 0:
        raise ValueError("J-NPE needs a non-empty calibration set")
    if len(validation) == 0:
        raise ValueError("J-NPE needs a non-empty calibration validation split")
    model = flow.copy()

    def batch(rng):
        theta, x, _ = jnpe_batch(task, calibration, cfg.batch_size, cfg.real_fraction, rng)
        return theta, x

    fit_flow(model, batch, validation.theta, validation.x, steps=cfg.steps,
             lr=cfg.learning_rate, val_interval=cfg.val_interval, seed=cfg.seed, label="jnpe")
    return FlowPosterior(model, model.summary(test.x))


@dataclass
class MLPConfig:
    steps: int = 2000
    learning_rate: float = 3e-4
    seed: int = 0


def _gaussian_nll(net: MLP, x, theta_scaled) -> Tensor:
    out = net(x)
    k = theta_scaled.shape[1]
    mean, log_var = out[:, :k], out[:, k:]
    return (0.5 * (log_var + ad.square(mean - Tensor(theta_scaled)) * ad.exp(-log_var))).sum(axis=1).mean()


def baseline_mlp(task: Task | str, calibration: LabeledDataset, validation: LabeledDataset,
                 test: LabeledDataset, cfg: MLPConfig | None = None,
                 nse_hidden=None) -> GaussianPosterior:
    """Statistic-network-shaped MLP emitting a diagonal Gaussian posterior."""
    task = get_task(task) if isinstance(task, str) else task
    cfg = cfg or MLPConfig()
    if len(calibration) == 0:
        raise ValueError("MLP baseline needs a non-empty calibration set")
    if len(validation) == 0:
        raise ValueError("MLP baseline needs a non-empty validation split "
                         "(at least 5 calibration pairs)")
    centre = 0.5 * (task.lower + task.upper)
    half = 0.5 * (task.upper - task.lower)
    shift = calibration.x.mean(axis=0)
    scale = calibration.x.std(axis=0)
    scale = np.where(scale > 1e-8, scale, 1.0)
    rng = np.random.default_rng(cfg.seed)
    hidden = task.nse_hidden if nse_hidden is None else nse_hidden
    net = MLP.create([task.d, *hidden, 2 * task.k], rng, shift, scale)
    net.weights[-1].data *= 0.01
    y_train = (calibration.theta - centre) / half
    y_val = (validation.theta - centre) / half
    opt = Adam(net.parameters(), cfg.learning_rate)
    best_val = _gaussian_nll(net, validation.x, y_val).item()
    best = [p.data.copy() for p in net.parameters()]
    for _ in range(cfg.steps):
        with Tape() as tape:
            loss = _gaussian_nll(net, calibration.x, y_train)
            tape.backward(loss)
        opt.step()
        val = _gaussian_nll(net, validation.x, y_val).item()
        if math.isfinite(val) and val < best_val:
            best_val, best = val, [p.data.copy() for p in net.parameters()]
    for p, a in zip(net.parameters(), best):
        p.data[...] = a
    out = net(test.x).data
    k = task.k
    mean = centre + half * out[:, :k]
    log_var = out[:, k:] + 2.0 * np.log(half)
    return GaussianPosterior(mean, log_var)
