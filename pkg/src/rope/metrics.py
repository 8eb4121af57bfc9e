"""Posterior quality metrics: LPP, ACAUC and coverage curves."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .simulators import LabeledDataset


@dataclass
class LPPResult:
    mean: float
    stderr: float
    n_neg_inf: int
    n: int


def _log_prob_fn(evaluator):
    return getattr(evaluator, "log_prob", evaluator)


def lpp_from_values(values) -> LPPResult:
    """Mean log-prob over the finite entries; -inf entries are counted, not averaged."""
    values = np.asarray(values, dtype=float).ravel()
    if len(values) == 0:
        raise ValueError("LPP of an empty test set")
    if np.any(np.isnan(values)):
        raise ValueError("log-probabilities contain NaN")
    finite = values[np.isfinite(values)]
    n_neg_inf = int(np.sum(values == -np.inf))
    if len(finite) == 0:
        return LPPResult(-math.inf, math.nan, n_neg_inf, len(values))
    stderr = float(finite.std(ddof=1) / math.sqrt(len(finite))) if len(finite) > 1 else 0.0
    return LPPResult(float(finite.mean()), stderr, n_neg_inf, len(values))


def compute_lpp(evaluator, test: LabeledDataset) -> LPPResult:
    """``evaluator`` maps the test labels (row i for observation i) to log-densities."""
    if len(test) == 0:
        raise ValueError("LPP of an empty test set")
    return lpp_from_values(_log_prob_fn(evaluator)(test.theta))


def credibility_levels(samples: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Smallest central-interval level containing the truth, per observation and dim.

    ``samples`` is (n, M, k) and ``theta`` is (n, k). With F the fraction of
    draws below the truth, the level is |2F - 1|.
    """
    samples = np.asarray(samples, dtype=float)
    theta = np.atleast_2d(theta)
    if samples.ndim != 3 or samples.shape[0] != theta.shape[0] or samples.shape[2] != theta.shape[1]:
        raise ValueError(f"samples {samples.shape} do not match parameters {theta.shape}")
    F = np.mean(samples < theta[:, None, :], axis=1)
    return np.abs(2.0 * F - 1.0)


def acauc_from_samples(samples: np.ndarray, theta: np.ndarray) -> float:
    """Average over dims of the area between nominal level and empirical coverage.

    Coverage at level a is the fraction of observations whose truth lies in
    the central a-interval. The area is evaluated exactly on the empirical
    step function at the sorted levels, which gives mean(level) - 1/2 per
    dimension. Positive values mean overconfident intervals.
    """
    levels = np.sort(credibility_levels(samples, theta), axis=0)
    n = levels.shape[0]
    grid = (np.arange(1, n + 1) - 0.5) / n
    return float(np.mean(levels - grid[:, None]))


def _draw(sampler, M: int, seed) -> np.ndarray:
    if hasattr(sampler, "sample"):
        return sampler.sample(M, seed)
    return sampler(M, seed)


def compute_acauc(sampler, test: LabeledDataset, M: int = 1000, seed: int = 0) -> float:
    """``sampler(M, seed)`` (or ``sampler.sample``) returns (n_test, M, k) draws."""
    if M < 100:
        raise ValueError(f"ACAUC needs at least 100 posterior draws per observation, got {M}")
    if len(test) == 0:
        raise ValueError("ACAUC of an empty test set")
    return acauc_from_samples(_draw(sampler, M, seed), test.theta)


def coverage_curve(samples: np.ndarray, theta: np.ndarray, levels=None) -> tuple[np.ndarray, np.ndarray]:
    """Empirical coverage of central credible intervals, averaged over dims.

    Returns (levels, coverage); interval bounds are sample quantiles, so
    the curve is non-decreasing in the level.
    """
    levels = np.linspace(0.0, 1.0, 21) if levels is None else np.asarray(levels, dtype=float)
    if np.any((levels < 0) | (levels > 1)):
        raise ValueError("credible levels must lie in [0, 1]")
    theta = np.atleast_2d(theta)
    cov = np.empty(len(levels))
    for n, a in enumerate(levels):
        lo = np.quantile(samples, 0.5 - a / 2, axis=1)
        hi = np.quantile(samples, 0.5 + a / 2, axis=1)
        cov[n] = np.mean((lo <= theta) & (theta <= hi))
    return levels, cov


@dataclass
class MetricsReport:
    method: str
    task: str
    n_calibration: int
    gamma: float
    tau: float
    repetition: int
    lpp: float
    lpp_stderr: float
    n_neg_inf: int
    acauc: float
    wall_clock_s: float | None
    seed: int

    def as_dict(self) -> dict:
        return asdict(self)
