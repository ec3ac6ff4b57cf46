import numpy as np
import pytest

from ecats.trajectory import (LabeledSet, Mu0Params, SchemaError, Trajectory, draw_mu0, load_csv, rng_for,
                              sample_mu0, sample_mu0_batch, save_csv, sub_seed)


def test_default_sample_shape():
    tr = sample_mu0(Mu0Params(), 3)
    assert tr.length == 101 and tr.n_dims == 1
    assert tr.t0 == 0.0 and tr.dt == 1.0
    assert tr.times[-1] == 100.0


def test_sampler_is_reproducible():
    a = sample_mu0(Mu0Params(n_dims=2), 11)
    b = sample_mu0(Mu0Params(n_dims=2), 11)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, sample_mu0(Mu0Params(n_dims=2), 12).values)


def test_q_zero_gives_monotone_paths():
    rng = np.random.default_rng(0)
    for _ in range(50):
        values, _, signs = draw_mu0(Mu0Params(q=0.0, n_dims=2), rng)
        for d in range(2):
            steps = np.diff(values[:, d])
            assert np.all(steps * signs[0, d] >= 0)


def test_total_variation_identity():
    rng = np.random.default_rng(1)
    for _ in range(200):
        values, tv, _ = draw_mu0(Mu0Params(n_dims=2), rng)
        assert np.allclose(np.abs(np.diff(values, axis=0)).sum(axis=0), tv, rtol=1e-12, atol=1e-12)


def test_short_interval_single_step():
    tr = sample_mu0(Mu0Params(a=0.0, b=1.0), 0)
    assert tr.length == 2


@pytest.mark.parametrize("kw", [dict(b=0.0), dict(delta=0.0), dict(sigma_start=0.0), dict(q=1.5), dict(n_dims=0)])
def test_invalid_params(kw):
    with pytest.raises(ValueError):
        Mu0Params(**kw)


def test_batch_uses_derived_streams():
    X = sample_mu0_batch(Mu0Params(b=10.0), 5, 4)
    assert X.shape == (4, 11, 1)
    assert np.array_equal(X[2], sample_mu0(Mu0Params(b=10.0), [5, 2]).values)


def test_named_substreams_differ():
    a = rng_for(0, "data").random()
    b = rng_for(0, "bank").random()
    assert a != b
    assert rng_for(0, "data").random() == a
    assert sub_seed(0, "train", 1) != sub_seed(0, "train", 2)


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((1, 1)))
    with pytest.raises(ValueError):
        Trajectory(np.array([[0.0], [np.nan]]))
    with pytest.raises(ValueError):
        Trajectory(np.zeros((3, 1)), dt=0.0)


def _toy_set():
    return LabeledSet([Trajectory(np.array([[0.0], [1.0], [2.0]])), Trajectory(np.array([[5.0], [4.0], [3.5]]))],
                      [0, 1], ["a", "b"])


def test_csv_round_trip(tmp_path):
    X = sample_mu0_batch(Mu0Params(b=20.0, n_dims=2), 0, 5)
    data = LabeledSet([Trajectory(x) for x in X], [0, 1, 0, 1, 1])
    save_csv(data, tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert back.labels == data.labels and back.ids == data.ids
    assert np.max(np.abs(back.array() - data.array())) <= 1e-9


def test_csv_two_trajectories(tmp_path):
    save_csv(_toy_set(), tmp_path / "d.csv")
    back = load_csv(tmp_path / "d.csv")
    assert len(back) == 2 and back.labels == [0, 1]


def _write(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    return p


@pytest.mark.parametrize("text, message, row", [
    ("traj_id,time,label,x_0\n", "no trajectories", None),
    ("traj_id,time,x_0\n", "header", 1),
    ("traj_id,time,label,x_0\na,0,0,1\na,1,0,abc\n", "non-numeric", 3),
    ("traj_id,time,label,x_0\na,0,0,1\na,1,0,2\nb,0,1,1\nb,1,1,1\nb,2,1,1\n", "ragged", 4),
    ("traj_id,time,label,x_0\na,0,0,1\na,1,1,2\n", "label changes", 3),
    ("traj_id,time,label,x_0\na,0,0,1\na,0,0,2\n", "strictly increasing", 3),
    ("traj_id,time,label,x_0\na,0,0,1\nb,0,0,1\na,1,0,2\n", "contiguous", 4),
    ("traj_id,time,label,x_0\na,0,0,1\na,1,0\n", "columns", 3),
    ("traj_id,time,label,x_0\na,0,0,1\na,1,0,2\na,3,0,2\n", "uniformly", 2),
    ("traj_id,time,label,x_0\na,0,2,1\na,1,2,2\n", "label must be", 2),
])
def test_csv_schema_errors(tmp_path, text, message, row):
    with pytest.raises(SchemaError, match=message) as err:
        load_csv(_write(tmp_path, text))
    assert err.value.row == row


def test_labeled_set_helpers():
    d = _toy_set()
    assert d.array().shape == (2, 3, 1)
    assert d.subset([1]).ids == ["b"]
    assert len(d.by_class(1)) == 1
    with pytest.raises(ValueError):
        LabeledSet([Trajectory(np.zeros((3, 1)))], [2])
