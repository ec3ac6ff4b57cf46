import math

import numpy as np
import pytest

from _oracles import finite_difference_grads, reference_loss, reference_probability, relative_error
from ecats.classifier import (PARAM_NAMES, ModelParams, TrainConfig, TrainingError, backward, forward,
                              load_checkpoint, loss_bce, predict, save_checkpoint, split_stratified, train)
from ecats.datasets import CruiseConfig, gen_cruise
from ecats.trajectory import LabeledSet, Trajectory


def _config(seed, T=10, C=5, d=4, h=8, N=6, n=1):
    rng = np.random.default_rng(seed)
    E = rng.normal(size=(C, d))
    X = rng.normal(size=(N, T, n))
    y = rng.integers(0, 2, N).astype(float)
    params = ModelParams.init(n, d, d_att=4, hidden=h, seed=seed)
    return params, X, y, E


def test_forward_matches_reference():
    params, X, _, E = _config(0)
    p, att = forward(params, X[0], E)
    p_ref, alpha_ref = reference_probability(params, X[0], E)
    assert p == pytest.approx(p_ref, abs=1e-12)
    assert np.allclose(att.weights, alpha_ref, atol=1e-12)


def test_attention_is_a_distribution():
    params, X, _, E = _config(1)
    _, att = forward(params, X[0], E)
    assert np.all(att.weights >= 0)
    assert abs(att.weights.sum() - 1) < 1e-9


def test_single_concept_gets_all_attention():
    params, X, _, E = _config(2, C=1)
    _, att = forward(params, X[0], E)
    assert att.weights.tolist() == [1.0]


def test_zero_query_key_gives_uniform_attention():
    params, X, _, E = _config(3, C=7)
    params.W_q[:] = 0
    params.W_k[:] = 0
    _, att = forward(params, X[0], E)
    assert np.allclose(att.weights, 1 / 7, atol=1e-15)


def test_shape_mismatch():
    params, X, _, E = _config(4)
    with pytest.raises(ValueError):
        forward(params, np.zeros((10, 2)), E)
    with pytest.raises(ValueError):
        forward(params, X[0], np.zeros((5, 3)))


def test_loss_examples():
    assert loss_bce([1.0, 0.0], [1, 0]) < 1e-11
    assert loss_bce([0.5, 0.5], [1, 0]) == pytest.approx(math.log(2))
    p, y = np.array([0.2, 0.9, 0.6]), np.array([0, 1, 1])
    assert loss_bce(p, y) == pytest.approx(np.mean([loss_bce([a], [b]) for a, b in zip(p, y)]))


@pytest.mark.parametrize("seed", range(5))
def test_gradient_check(seed):
    params, X, y, E = _config(seed)
    loss, g = backward(params, X, y, E)
    assert loss == pytest.approx(reference_loss(params, X, y, E), abs=1e-12)
    fd = finite_difference_grads(params, X, y, E, reference_loss)
    for name in PARAM_NAMES:
        assert relative_error(g[name], fd[name]) <= 1e-4, name


def test_stationary_point_with_zero_output_layer():
    params, X, y, E = _config(5)
    params.W_2[:] = 0
    _, g = backward(params, X, y, E)
    for name in ("W_q", "b_q", "W_k", "W_v", "W_1", "b_1"):
        assert np.all(g[name] == 0), name


def test_saturated_sample_has_finite_gradient():
    params, X, y, E = _config(6)
    params.b_2 = 80.0
    loss, g = backward(params, X, np.zeros(len(X)), E)
    assert np.isfinite(loss)
    assert all(np.all(np.isfinite(v)) for v in g.values())


def test_non_finite_gradient_is_reported():
    params, X, y, E = _config(7)
    params.W_1[0, 0] = np.nan
    with pytest.raises(TrainingError, match="non-finite gradient"):
        backward(params, X, y, E)


def test_concept_permutation_equivariance():
    params, X, _, E = _config(8, C=6)
    perm = np.random.default_rng(0).permutation(6)
    p, att = forward(params, X[0], E)
    p2, att2 = forward(params, X[0], E[perm])
    assert p2 == pytest.approx(p, abs=1e-12)
    assert np.allclose(att2.weights, att.weights[perm], atol=1e-15)


def test_ranking_invariant_to_logit_scale():
    # one query token: scaling the logits by c > 0 keeps the order of the softmax
    params, _, _, E = _config(9, C=8)
    x = np.array([[0.7]])
    _, att = forward(params, x, E)
    params.W_q *= 3.0
    params.b_q *= 3.0
    _, att3 = forward(params, x, E)
    assert not np.allclose(att.weights, att3.weights)
    assert np.array_equal(att.ranking(), att3.ranking())


@pytest.fixture(scope="module")
def cruise_small():
    data = gen_cruise(CruiseConfig(n_traj=60, n_outliers=0), seed=3)
    E = np.random.default_rng(0).normal(size=(12, 6))
    return data, E


def test_training_reaches_high_train_accuracy(cruise_small):
    data, E = cruise_small
    _, hist = train(data, E, TrainConfig(epochs=40, learning_rate=1e-2), seed=0)
    assert hist[-1]["accuracy"] >= 0.95
    assert [h["epoch"] for h in hist] == list(range(1, 41))


def test_overfit_tiny_set_loss_decreases(cruise_small):
    data, E = cruise_small
    tiny = data.subset(range(8))
    _, hist = train(tiny, E, TrainConfig(epochs=60, learning_rate=1e-3, batch_size=8), seed=1)
    losses = np.array([h["loss"] for h in hist])
    assert np.all(np.diff(losses) <= 1e-3)
    assert losses[-1] < 0.7 * losses[0]


def test_training_is_deterministic(cruise_small):
    data, E = cruise_small
    cfg = TrainConfig(epochs=3, learning_rate=1e-2)
    a, _ = train(data, E, cfg, seed=4)
    b, _ = train(data, E, cfg, seed=4)
    c, _ = train(data, E, cfg, seed=5)
    for name in PARAM_NAMES:
        assert np.array_equal(np.asarray(getattr(a, name)), np.asarray(getattr(b, name)))
    assert not np.array_equal(a.W_q, c.W_q)


def test_sgd_variant_runs(cruise_small):
    data, E = cruise_small
    _, hist = train(data, E, TrainConfig(epochs=2, learning_rate=1e-2, optimizer="sgd"), seed=0)
    assert len(hist) == 2


def test_train_errors_and_warnings(cruise_small):
    data, E = cruise_small
    with pytest.raises(TrainingError, match="empty"):
        train(LabeledSet([], []), E)
    ones = data.subset([i for i, y in enumerate(data.labels) if y == 1][:4])
    with pytest.warns(UserWarning, match="single class"):
        train(ones, E, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)


def test_predict_tie_rule_and_purity(cruise_small):
    data, E = cruise_small
    params = ModelParams.init(1, E.shape[1], seed=0)
    params.W_2[:] = 0
    params.b_2 = 0.0
    pred = predict(params, data, E)
    assert np.all(pred.probabilities == 0.5) and np.all(pred.labels == 1)
    params = ModelParams.init(1, E.shape[1], seed=0)
    a, b = predict(params, data, E), predict(params, data, E)
    assert np.array_equal(a.probabilities, b.probabilities)


def test_accuracy_hand_count():
    from ecats.classifier import Prediction
    pred = Prediction(np.array([1, 0, 1, 1]), np.zeros(4), [])
    assert pred.accuracy([1, 1, 1, 0]) == 0.5


def test_split_is_stratified_and_disjoint():
    data = gen_cruise(CruiseConfig(n_traj=20, n_outliers=0), seed=0)
    tr, te = split_stratified(data, 0.3, 7)
    assert not set(tr) & set(te) and len(tr) + len(te) == 20
    assert sorted(data.y[te].tolist()) == [0, 0, 0, 1, 1, 1]
    assert split_stratified(data, 0.3, 7) == (tr, te)


def test_checkpoint_round_trip(tmp_path):
    params = ModelParams.init(2, 5, seed=3, x_mean=[1.0, 2.0], x_scale=[0.5, 4.0])
    save_checkpoint(params, tmp_path / "m.csv", {"seed": 3})
    back, meta = load_checkpoint(tmp_path / "m.csv")
    assert meta["seed"] == 3
    for name in list(PARAM_NAMES) + ["x_mean", "x_scale"]:
        assert np.array_equal(np.asarray(getattr(back, name)), np.asarray(getattr(params, name)))
