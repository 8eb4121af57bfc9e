import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from rope import simulators as sim
from rope.simulators import (CS, PENDULUM, SIR, LabeledDataset, PriorSupportError,
                             generate_dataset, get_task, make_splits)


def test_pendulum_constant_series_when_frozen():
    x = sim.pendulum_simulate([0.0, 1.0], 0, phase=0.0, noise=False)
    np.testing.assert_array_equal(x, np.ones(200))


def test_pendulum_value_at_pi():
    x = sim.pendulum_simulate([1.0, 2.0], 0, phase=0.0, noise=False)
    i = int(np.argmin(np.abs(sim.PENDULUM_TIMES - math.pi)))
    assert x[i] == pytest.approx(2 * math.cos(sim.PENDULUM_TIMES[i]))
    assert x[i] == pytest.approx(-2.0, abs=0.01)


def test_pendulum_zero_damping_equals_well_specified():
    a = sim.pendulum_simulate([1.3, 4.0], 11, misspecified=True, alpha=0.0)
    b = sim.pendulum_simulate([1.3, 4.0], 11, misspecified=False)
    np.testing.assert_array_equal(a, b)


def test_pendulum_damping_shrinks_envelope():
    a = sim.pendulum_simulate([1.0, 5.0], 3, misspecified=True, alpha=0.5, noise=False)
    assert np.max(np.abs(a[-50:])) < 5.0 * math.exp(-0.5 * 7.0)


def test_pendulum_grid_and_support():
    assert len(sim.PENDULUM_TIMES) == 200
    assert sim.PENDULUM_TIMES[0] == 0.0 and sim.PENDULUM_TIMES[-1] == 10.0
    with pytest.raises(PriorSupportError):
        sim.pendulum_simulate([3.5, 1.0], 0)
    with pytest.raises(PriorSupportError):
        sim.pendulum_simulate([1.0, 0.1], 0)


def test_pendulum_noise_bound():
    rng = np.random.default_rng(0)
    theta = PENDULUM.prior_sample(5000, rng)
    x = PENDULUM.simulate(theta, rng)
    assert np.all(np.abs(x) <= theta[:, 1:2] + 6 * sim.PENDULUM_NOISE)


@given(st.integers(0, 2**32 - 1))
def test_prior_draws_in_box(seed):
    th = sim.pendulum_prior_sample(seed)
    assert 0.0 <= th[0] <= 3.0 and 0.5 <= th[1] <= 10.0


def test_prior_log_density():
    assert PENDULUM.prior_log_prob([1.0, 2.0])[0] == pytest.approx(-math.log(28.5), abs=1e-12)
    assert -math.log(28.5) == pytest.approx(-3.34990, abs=1e-5)
    assert PENDULUM.prior_log_prob([4.0, 2.0])[0] == -math.inf


@pytest.mark.parametrize("task", [PENDULUM, SIR, CS])
def test_prior_histograms_uniform(task):
    theta = task.prior_sample(100_000, np.random.default_rng(5))
    for j in range(task.k):
        counts, _ = np.histogram(theta[:, j], bins=20, range=(task.lower[j], task.upper[j]))
        assert stats.chisquare(counts).pvalue > 0.01


@pytest.mark.parametrize("task,misspecified", [(t, m) for t in (PENDULUM, SIR, CS)
                                               for m in (False, True)])
def test_same_seed_bitwise_identical(task, misspecified):
    theta = task.prior_sample(3, np.random.default_rng(0))
    a = task.simulate(theta, np.random.default_rng(9), misspecified)
    b = task.simulate(theta, np.random.default_rng(9), misspecified)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (3, task.d) and np.all(np.isfinite(a))


def test_task_dimensions():
    assert (PENDULUM.k, PENDULUM.d, PENDULUM.summary_dim) == (2, 200, 10)
    assert (SIR.k, SIR.d, SIR.summary_dim) == (2, 6, 5)
    assert (CS.k, CS.d, CS.summary_dim) == (3, 4, 4)
    with pytest.raises(ValueError):
        get_task("tunnel")


def test_sir_conservation():
    S, I, R = sim.sir_trajectory(np.array([[0.3, 0.1], [0.05, 0.2]]), np.random.default_rng(1))
    np.testing.assert_array_equal(S + I + R, sim.SIR_POPULATION)
    assert np.all(S[:, 1:] <= S[:, :-1])


def test_sir_zero_transmission():
    S, I, _ = sim.sir_trajectory(np.array([[0.0, 0.1]]), np.random.default_rng(2))
    assert np.all(S == S[0, 0])
    assert np.all(np.diff(I[0]) <= 0)
    x = sim.sir_simulate([0.0, 0.1], 2)
    assert x[2] == I[0, 1]  # max of the decaying series is its first day


def test_sir_rate_errors():
    with pytest.raises(ValueError):
        sim.sir_simulate([-0.1, 0.1], 0)
    with pytest.raises(ValueError):
        sim.sir_simulate([0.2, 0.0], 0)


def _summaries_reference(series):
    out = []
    for row in np.atleast_2d(series):
        n = len(row)
        mean = sum(row) / n
        srt = sorted(row)
        median = (srt[n // 2 - 1] + srt[n // 2]) / 2 if n % 2 == 0 else srt[n // 2]
        peak = max(row)
        argmax = list(row).index(peak) + 1
        total, acc, half = sum(row), 0.0, None
        for d, v in enumerate(row, start=1):
            acc += v
            if half is None and acc >= total / 2:
                half = d
        num = sum((row[t] - mean) * (row[t - 1] - mean) for t in range(1, n))
        den = sum((v - mean) ** 2 for v in row)
        out.append([mean, median, peak, argmax, half, num / den if den else 0.0])
    return np.array(out)


def test_sir_summaries_match_reference():
    rng = np.random.default_rng(3)
    _, I, _ = sim.sir_trajectory(np.array([[0.35, 0.08], [0.2, 0.15]]), rng)
    series = I[:, 1:].astype(float)
    np.testing.assert_allclose(sim.sir_summaries(series), _summaries_reference(series),
                               rtol=1e-12)


def test_weekend_delay_moves_five_percent():
    series = np.zeros(14)
    series[5], series[6] = 100.0, 40.0  # first Saturday and Sunday
    out = sim.delay_weekend_counts(series)
    assert out[5] == 95.0 and out[6] == 38.0 and out[7] == 7.0
    assert out.sum() == series.sum()


def test_weekend_delay_zero_counts_unchanged():
    series = np.ones(21)
    series[[5, 6, 12, 13, 19, 20]] = 0.0
    np.testing.assert_array_equal(sim.delay_weekend_counts(series), series)


def test_cs_statistics_oracle():
    cancer = np.array([[0.5, 0.5]])
    stromal = np.array([[0.5, 0.8], [0.1, 0.5], [0.9, 0.9]])
    d = [0.3, 0.4, math.hypot(0.4, 0.4)]
    np.testing.assert_allclose(sim.cs_statistics(cancer, stromal),
                               [1, 3, np.mean(d), max(d)], rtol=1e-12)


def test_cs_degenerate_cases():
    s = sim.cs_statistics(np.empty((0, 2)), np.array([[0.2, 0.2]]))
    np.testing.assert_allclose(s[2:], math.sqrt(2))
    s = sim.cs_statistics(np.array([[0.2, 0.2]]), np.empty((0, 2)))
    np.testing.assert_allclose(s, [1, 0, 0, 0])


def test_cs_no_daughters_misspecification_is_noop():
    a = sim.cs_simulate([20.0, 100.0, 0.0], 4, misspecified=True)
    b = sim.cs_simulate([20.0, 100.0, 0.0], 4, misspecified=False)
    np.testing.assert_array_equal(a, b)


@given(st.integers(0, 10_000))
def test_cs_removal_only_deletes(seed):
    theta = [30.0, 200.0, 8.0]
    a = sim.cs_simulate(theta, seed, misspecified=True)
    b = sim.cs_simulate(theta, seed, misspecified=False)
    assert a[0] <= b[0] and a[1] == b[1]


def test_make_splits_shares(rng):
    ds = generate_dataset(PENDULUM, 120, 0)
    cal, val, test = make_splits(ds, 50, 1)
    assert (len(cal), len(val), len(test)) == (40, 10, 70)
    cal, val, _ = make_splits(ds, 10, 1, n_test=0)
    assert (len(cal), len(val)) == (8, 2)
    assert cal.split_role == "calibration" and val.split_role == "calibration_val"


def test_make_splits_disjoint_and_errors():
    ds = generate_dataset(PENDULUM, 60, 0)
    cal, val, test = make_splits(ds, 20, 3, n_test=40)
    rows = np.vstack([cal.theta, val.theta, test.theta])
    assert len(np.unique(rows, axis=0)) == 60
    with pytest.raises(ValueError):
        make_splits(ds, 30, 3, n_test=40)


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(SIR, 7, 42, provenance="simulated")
    ds.save(tmp_path / "d.tbl")
    back = LabeledDataset.load(tmp_path / "d.tbl")
    assert back.theta.tobytes() == ds.theta.tobytes() and back.x.tobytes() == ds.x.tobytes()
    assert (back.task, back.provenance, back.seed) == ("sir", "simulated", 42)


def test_derive_seed_is_stable_and_distinct():
    assert sim.derive_seed(0, "a", 1) == sim.derive_seed(0, "a", 1)
    assert sim.derive_seed(0, "a", 1) != sim.derive_seed(0, "a", 2)
    assert sim.derive_seed(0, "a") != sim.derive_seed(1, "a")
