import numpy as np
import pytest

from oracles import (flow_gradient_error, flow_mc_normalisation, flow_round_trip_error,
                     perturbed_flow)
from rope.npe import MLP, FlowModel, TrainConfig, posterior_predictive_check, train_npe


def test_round_trip():
    assert flow_round_trip_error(seed=0) < 1e-10
    assert flow_round_trip_error(seed=3) < 1e-10


def test_density_normalises_on_box():
    est, se = flow_mc_normalisation(seed=0, n=50_000)
    assert abs(est - 1.0) < 3 * se + 0.01


def test_parameter_gradients_match_finite_differences():
    assert flow_gradient_error(seed=0) < 1e-5


def test_density_is_zero_outside_box():
    flow = perturbed_flow()
    lp = flow.log_prob(np.array([[2.5, 1.0], [1.0, 1.0]]), np.zeros((2, flow.summary_dim)))
    assert lp[0] == -np.inf and np.isfinite(lp[1])


def test_samples_inside_box_and_reproducible():
    flow = perturbed_flow()
    s = np.random.default_rng(0).normal(size=(3, flow.summary_dim))
    a = flow.sample_many(s, 200, 7)
    b = flow.sample_many(s, 200, 7)
    assert a.shape == (3, 200, 2)
    assert a.tobytes() == b.tobytes()
    assert np.all((a >= 0) & (a <= 2))


def test_checkpoint_round_trip(tmp_path):
    flow = perturbed_flow(seed=4)
    flow.save(tmp_path / "f.flow")
    back = FlowModel.load(tmp_path / "f.flow")
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, flow.nse.in_dim))
    theta = rng.uniform(0.1, 1.9, size=(4, 2))
    np.testing.assert_array_equal(back.log_prob_x(theta, x), flow.log_prob_x(theta, x))


def test_mlp_checkpoint_round_trip(tmp_path):
    g = perturbed_flow(seed=2).nse
    g.save(tmp_path / "g.nse")
    back = MLP.load(tmp_path / "g.nse")
    x = np.random.default_rng(0).normal(size=(5, g.in_dim))
    np.testing.assert_array_equal(back(x).data, g(x).data)


def test_load_rejects_wrong_kind(tmp_path):
    perturbed_flow().nse.save(tmp_path / "g.nse")
    with pytest.raises(ValueError):
        FlowModel.load(tmp_path / "g.nse")


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(val_size=10)


def test_short_training_improves_validation():
    model = train_npe("sir", TrainConfig(max_steps=150, val_interval=50, val_size=1000,
                                         hidden=32, seed=1))
    hist = model.info["history"]
    assert hist[0][0] == 0
    assert model.info["best_val_log_prob"] > hist[0][2]
    rep = posterior_predictive_check(model, "sir", 50, seed=0, n_posterior_samples=19)
    assert rep.ranks.shape == (50, 2)
    assert np.all((rep.ranks >= 0) & (rep.ranks <= 19))
