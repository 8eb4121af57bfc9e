"""Config-driven benchmark grid: methods x calibration sizes x gamma x tau x repetitions.

Outputs under ``output_dir``:

``results.tsv``
    one row per cell, columns ``RESULT_COLUMNS``. ``wall_clock_s`` is NA
    unless ``record_wall_clock`` is set, so that identical configs give
    byte-identical tables.
``timings.tsv``
    method, n_calibration, gamma, tau, repetition, wall_clock_s.
``failures.tsv``
    cells that raised, with the error message.
``lpp_vs_ncal.tsv`` / ``acauc_vs_ncal.tsv``
    method, n_calibration, gamma, tau, mean, std, n_reps.
``coverage.tsv``
    method, n_calibration, gamma, tau, repetition, level, coverage.
``corner/``
    posterior draws for a few fixed test observations, true theta in the
    ``#`` header line.
``provenance/``
    JSON records for every RoPE-family cell.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import core
from .metrics import MetricsReport, acauc_from_samples, coverage_curve, lpp_from_values
from .npe import FlowModel, TrainConfig, train_npe
from .simulators import generate_dataset, get_task, derive_seed, make_splits

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("method", "task", "n_calibration", "gamma", "tau", "repetition", "lpp",
                  "lpp_stderr", "n_neg_inf", "acauc", "wall_clock_s", "seed")
METHODS = ("prior", "sbi", "npe", "jnpe", "mlp", "rope", "rope_star", "ot_only", "tuning_only")
# methods whose output does not depend on the calibration set
CALIBRATION_FREE = ("prior", "sbi", "npe", "ot_only")
OT_METHODS = ("rope", "rope_star", "ot_only")


@dataclass
class ExperimentConfig:
    task: str = "pendulum"
    calibration_sizes: list = field(default_factory=lambda: [10, 50, 100, 1000])
    gammas: list = field(default_factory=lambda: [0.5])
    taus: list = field(default_factory=lambda: [0.9])
    methods: list = field(default_factory=lambda: list(METHODS))
    test_size: int = 2000
    repetitions: int = 3
    master_seed: int = 0
    output_dir: str = "results"
    npe: dict = field(default_factory=dict)
    shared_npe: bool = False
    cache_dir: str | None = ".rope_cache"
    finetune_steps: int = 5000
    finetune_lr: float | None = None
    mc_samples: int = 1
    posterior_samples: int = 1000
    bank_size: int = 10_000
    coverage_levels: int = 21
    corner_observations: int = 3
    jnpe_steps: int = 2000
    mlp_steps: int = 2000
    test_box: list | None = None
    record_wall_clock: bool = False

    def __post_init__(self):
        if self.test_size < 1:
            raise ValueError("test_size must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if any(n < 0 for n in self.calibration_sizes):
            raise ValueError("calibration sizes must be non-negative")
        for g in self.gammas:
            if g <= 0:
                raise ValueError(f"gamma must be positive, got {g}")
        for t in self.taus:
            if not 0 < t <= 1:
                raise ValueError(f"tau must lie in (0, 1], got {t}")
        get_task(self.task)
        TrainConfig(**self.npe)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, source: str | Path) -> ExperimentConfig:
        """A preset name or a YAML file path."""
        if str(source) in PRESETS:
            return cls.from_dict(PRESETS[str(source)])
        with open(source) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{source}: config must be a mapping")
        base = data.pop("preset", None)
        merged = dict(PRESETS[base]) if base else {}
        merged.update(data)
        return cls.from_dict(merged)

    def to_yaml(self) -> str:
        return yaml.safe_dump(asdict(self), sort_keys=True)


PRESETS: dict[str, dict] = {
    "default": {},
    "smoke": {
        "calibration_sizes": [10], "taus": [0.9], "test_size": 40, "repetitions": 1,
        "npe": {"max_steps": 200, "val_interval": 100, "val_size": 1000},
        "finetune_steps": 20, "posterior_samples": 100, "bank_size": 200,
        "jnpe_steps": 20, "mlp_steps": 20, "corner_observations": 2,
        "output_dir": "results-smoke",
    },
    "acceptance": {
        "calibration_sizes": [10, 50, 100], "gammas": [0.5], "taus": [0.9], "test_size": 500,
        "repetitions": 3, "methods": ["prior", "sbi", "npe", "rope", "ot_only", "tuning_only"],
        "npe": {"max_steps": 20000, "val_interval": 1000, "val_size": 2000},
        "bank_size": 1000, "output_dir": "results-acceptance",
    },
    "prior-probe": {
        "calibration_sizes": [50], "gammas": [0.5], "taus": [0.5], "test_size": 500,
        "repetitions": 3, "methods": ["rope", "rope_star"],
        "npe": {"max_steps": 20000, "val_interval": 1000, "val_size": 2000},
        "bank_size": 1000, "test_box": [[0.0, 1.5], [0.5, 5.25]],
        "output_dir": "results-prior-probe",
    },
}


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "NA" if math.isnan(v) else repr(v)
    return str(v)


def write_tsv(path: Path, columns, rows) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(row[c]) for c in columns) + "\n")


def npe_cache_key(task: str, cfg: TrainConfig) -> str:
    blob = json.dumps({"task": task, **asdict(cfg)}, sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()[:16]


def get_npe(task: str, cfg: TrainConfig, cache_dir: str | None) -> FlowModel:
    """Train, or reuse a checkpoint cached under the config hash."""
    if cache_dir is None:
        return train_npe(task, cfg)
    path = Path(cache_dir) / f"npe-{task}-{npe_cache_key(task, cfg)}.flow"
    if path.exists():
        log.info("reusing NPE checkpoint %s", path)
        return FlowModel.load(path)
    model = train_npe(task, cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    model.save(tmp)
    tmp.replace(path)
    return model


@dataclass
class Cell:
    method: str
    n_calibration: int
    gamma: float | None
    tau: float | None

    @property
    def tag(self) -> str:
        g = "NA" if self.gamma is None else f"{self.gamma:g}"
        t = "NA" if self.tau is None else f"{self.tau:g}"
        return f"{self.method}_n{self.n_calibration}_g{g}_t{t}"


def expand_cells(cfg: ExperimentConfig) -> list[Cell]:
    cells = []
    for method in cfg.methods:
        if method in ("prior", "sbi", "npe"):
            cells.append(Cell(method, 0, None, None))
        elif method == "ot_only":
            cells += [Cell(method, 0, g, 1.0) for g in cfg.gammas]
        elif method == "rope":
            cells += [Cell(method, n, g, 1.0) for n in cfg.calibration_sizes for g in cfg.gammas]
        elif method == "rope_star":
            cells += [Cell(method, n, g, t) for n in cfg.calibration_sizes for g in cfg.gammas
                      for t in cfg.taus if t < 1.0]
        else:
            cells += [Cell(method, n, None, None) for n in cfg.calibration_sizes]
    return cells


class _Repetition:
    """Data, models and caches shared by all cells of one repetition."""

    def __init__(self, cfg: ExperimentConfig, rep: int):
        self.cfg = cfg
        self.rep = rep
        self.task = get_task(cfg.task)
        self.seed = derive_seed(cfg.master_seed, "repetition", rep)
        npe_seed = derive_seed(cfg.master_seed, "npe") if cfg.shared_npe else \
            derive_seed(self.seed, "npe")
        self.flow = get_npe(cfg.task, TrainConfig(**{**cfg.npe, "seed": npe_seed}), cfg.cache_dir)
        box = None if cfg.test_box is None else np.asarray(cfg.test_box, dtype=float)
        self.test = generate_dataset(self.task, cfg.test_size, derive_seed(self.seed, "test"),
                                     box=box).subset(np.arange(cfg.test_size), "test")
        n_pool = max([0, *cfg.calibration_sizes])
        self.pool = generate_dataset(self.task, n_pool, derive_seed(self.seed, "calibration"),
                                     box=box)
        self.sims = core.simulate_from_prior(self.task, cfg.test_size, derive_seed(self.seed, "sims"))
        self.sim_summaries = self.flow.summary(self.sims.x)
        rng = np.random.default_rng(derive_seed(self.seed, "corner"))
        n_corner = min(cfg.corner_observations, cfg.test_size)
        self.corner_idx = np.sort(rng.choice(cfg.test_size, size=n_corner, replace=False))
        self._splits: dict = {}
        self._g: dict = {}

    def splits(self, n_cal: int):
        if n_cal not in self._splits:
            pool = self.pool.subset(np.arange(n_cal))
            cal, val, _ = make_splits(pool, n_cal, derive_seed(self.seed, "split", n_cal), n_test=0)
            self._splits[n_cal] = (cal, val)
        return self._splits[n_cal]

    def g(self, n_cal: int):
        if n_cal not in self._g:
            cal, val = self.splits(n_cal)
            ft = core.FineTuneConfig(
                learning_rate=self.cfg.finetune_lr or self.task.finetune_lr,
                steps=self.cfg.finetune_steps, mc_samples=self.cfg.mc_samples,
                seed=derive_seed(self.seed, "finetune", n_cal))
            self._g[n_cal] = core.finetune_nse(self.flow, cal, self.task, ft, validation=val)
        return self._g[n_cal]

    def posterior(self, cell: Cell):
        """Returns (evaluator, provenance or None)."""
        cfg, task, test = self.cfg, self.task, self.test
        m = cell.method
        if m == "prior":
            return core.baseline_prior(task, test), None
        if m == "npe":
            return core.baseline_npe_direct(self.flow, test), None
        if m == "sbi":
            return core.sbi_reference(self.flow, task, test.theta,
                                      derive_seed(self.seed, "sbi-reference")), None
        if m == "tuning_only":
            return core.tuning_only(self.flow, self.g(cell.n_calibration), test.x), None
        if m == "mlp":
            cal, val = self.splits(cell.n_calibration)
            mcfg = core.MLPConfig(steps=cfg.mlp_steps,
                                  seed=derive_seed(self.seed, "mlp", cell.n_calibration))
            return core.baseline_mlp(task, cal, val, test, mcfg), None
        if m == "jnpe":
            cal, val = self.splits(cell.n_calibration)
            jcfg = core.JNPEConfig(steps=cfg.jnpe_steps, val_interval=max(1, cfg.jnpe_steps // 20),
                                   seed=derive_seed(self.seed, "jnpe", cell.n_calibration))
            return core.baseline_jnpe(self.flow, task, cal, val, test, jcfg), None
        g = None if m == "ot_only" else self.g(cell.n_calibration)
        result = core.rope_posterior(
            self.flow, task, test.x, g=g, gamma=cell.gamma, tau=cell.tau, sims=self.sims,
            sim_summaries=self.sim_summaries, bank_size=cfg.bank_size,
            sim_seed=derive_seed(self.seed, "sims"))
        prov = dict(result.provenance)
        prov.update({"method": m, "task": task.name, "repetition": self.rep,
                     "n_calibration": cell.n_calibration, "master_seed": cfg.master_seed,
                     "repetition_seed": self.seed})
        if g is not None:
            cal, val = self.splits(cell.n_calibration)
            prov["calibration_hash"] = core.content_hash(cal.theta, cal.x, val.theta, val.x)
            prov["finetune_val_loss"] = [g.info["initial_val_loss"], g.info["best_val_loss"]]
        return result.posterior, prov


def evaluate_cell(state: _Repetition, cell: Cell, out: Path) -> tuple[dict, list, float]:
    cfg = state.cfg
    t0 = time.perf_counter()
    evaluator, prov = state.posterior(cell)
    lpp = lpp_from_values(evaluator.log_prob(state.test.theta))
    sample_seed = derive_seed(state.seed, "posterior-samples", cell.tag)
    samples = evaluator.sample(cfg.posterior_samples, sample_seed)
    acauc = acauc_from_samples(samples, state.test.theta)
    levels, cov = coverage_curve(samples, state.test.theta,
                                 np.linspace(0.0, 1.0, cfg.coverage_levels))
    elapsed = time.perf_counter() - t0
    corner_dir = out / "corner"
    corner_dir.mkdir(exist_ok=True)
    for i in state.corner_idx:
        truth = " ".join(repr(float(v)) for v in state.test.theta[i])
        header = f"theta_true: {truth}\n" + "\t".join(state.task.param_names)
        np.savetxt(corner_dir / f"{cell.tag}_rep{state.rep}_obs{i}.tsv", samples[i],
                   delimiter="\t", header=header, fmt="%.10g")
    if prov is not None:
        (out / "provenance").mkdir(exist_ok=True)
        with open(out / "provenance" / f"{cell.tag}_rep{state.rep}.json", "w") as fh:
            json.dump(prov, fh, indent=1, sort_keys=True, default=_json_default)
    report = MetricsReport(cell.method, cfg.task, cell.n_calibration, cell.gamma, cell.tau,
                           state.rep, lpp.mean, lpp.stderr, lpp.n_neg_inf, acauc,
                           elapsed if cfg.record_wall_clock else None,
                           derive_seed(state.seed, cell.tag))
    coverage_rows = [{"method": cell.method, "n_calibration": cell.n_calibration,
                      "gamma": cell.gamma, "tau": cell.tau, "repetition": state.rep,
                      "level": float(a), "coverage": float(c)} for a, c in zip(levels, cov)]
    return report.as_dict(), coverage_rows, elapsed


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o)}")


def _aggregate(rows: list[dict], metric: str) -> list[dict]:
    groups: dict = {}
    for r in rows:
        if r[metric] is None or not math.isfinite(r[metric]):
            continue
        groups.setdefault((r["method"], r["n_calibration"], r["gamma"], r["tau"]), []).append(r[metric])
    out = []
    for (m, n, g, t), vals in groups.items():
        out.append({"method": m, "n_calibration": n, "gamma": g, "tau": t,
                    "mean": float(np.mean(vals)),
                    "std": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
                    "n_reps": len(vals)})
    return out


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> list[dict]:
    """Run the full grid; failing cells are logged and skipped."""
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())
    cells = expand_cells(cfg)
    rows, coverage_rows, timings, failures = [], [], [], []
    for rep in range(cfg.repetitions):
        state = _Repetition(cfg, rep)
        for cell in cells:
            log.info("rep %d cell %s", rep, cell.tag)
            try:
                row, cov, elapsed = evaluate_cell(state, cell, out)
            except Exception as exc:  # noqa: BLE001 - one bad cell must not sink the grid
                log.exception("cell %s rep %d failed", cell.tag, rep)
                failures.append({"method": cell.method, "n_calibration": cell.n_calibration,
                                 "gamma": cell.gamma, "tau": cell.tau, "repetition": rep,
                                 "error": f"{type(exc).__name__}: {exc}".replace("\t", " ")
                                 .replace("\n", " ")})
                continue
            rows.append(row)
            coverage_rows += cov
            timings.append({"method": cell.method, "n_calibration": cell.n_calibration,
                            "gamma": cell.gamma, "tau": cell.tau, "repetition": rep,
                            "wall_clock_s": elapsed})
    key = ("method", "n_calibration", "gamma", "tau", "repetition")
    write_tsv(out / "results.tsv", RESULT_COLUMNS, rows)
    write_tsv(out / "timings.tsv", key + ("wall_clock_s",), timings)
    write_tsv(out / "failures.tsv", key + ("error",), failures)
    agg_cols = ("method", "n_calibration", "gamma", "tau", "mean", "std", "n_reps")
    write_tsv(out / "lpp_vs_ncal.tsv", agg_cols, _aggregate(rows, "lpp"))
    write_tsv(out / "acauc_vs_ncal.tsv", agg_cols, _aggregate(rows, "acauc"))
    write_tsv(out / "coverage.tsv", key + ("level", "coverage"), coverage_rows)
    return rows


def read_results(path: str | Path) -> list[dict]:
    """Parse a results table back into dicts with numeric fields."""
    rows = []
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            vals = line.rstrip("\n").split("\t")
            row = {}
            for c, v in zip(header, vals):
                if v == "NA":
                    row[c] = None
                elif c in ("method", "task"):
                    row[c] = v
                elif c in ("n_calibration", "repetition", "n_neg_inf", "seed"):
                    row[c] = int(v)
                else:
                    row[c] = float(v)
            rows.append(row)
    return rows


# --------------------------------------------------------------------------
# self-calibration diagnostic


@dataclass
class SelfCalibrationReport:
    ks: list
    col_error: float
    n_o: int
    n_s: int
    n_pooled: int
    coupling: dict


def self_calibration(flow: FlowModel, task, *, n_o: int = 2000, n_s: int | None = None,
                     gamma: float = 0.5, tau: float = 1.0, n_pooled: int = 100_000,
                     seed: int = 0, stratified: bool = True, bank_size: int = 1000,
                     g=None) -> SelfCalibrationReport:
    """Pooled mixture-posterior draws over a real test set against prior draws.

    Each observation contributes ``n_pooled / n_o`` draws. The simulation
    parameters are Latin-hypercube stratified by default, which removes the
    sampling noise of the simulation marginal itself.
    """
    from scipy.stats import ks_2samp

    task = get_task(task) if isinstance(task, str) else task
    test = generate_dataset(task, n_o, derive_seed(seed, "selfcal-test"))
    result = core.rope_posterior(flow, task, test.x, g=g, gamma=gamma, tau=tau, n_sims=n_s,
                                 sim_seed=derive_seed(seed, "selfcal-sims"),
                                 stratified=stratified, bank_size=bank_size)
    per_obs = max(1, n_pooled // n_o)
    pooled = result.posterior.sample(per_obs, derive_seed(seed, "selfcal-draws")).reshape(-1, task.k)
    prior = task.prior_sample(len(pooled), np.random.default_rng(derive_seed(seed, "selfcal-prior")))
    ks = [float(ks_2samp(pooled[:, j], prior[:, j]).statistic) for j in range(task.k)]
    col_error = float(np.max(np.abs(result.coupling.col_sums - 1.0 / len(result.sims))))
    return SelfCalibrationReport(ks, col_error, n_o, len(result.sims), len(pooled),
                                 result.coupling.diagnostics())
