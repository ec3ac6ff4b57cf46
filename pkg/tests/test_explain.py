import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from _oracles import brute_robustness
from ecats.explain import (ExplanationError, LocalExplanation, default_epsilon_grid, explain_global,
                           explain_local, postprocess, robustness_report, separation, write_report)
from ecats.stl import Atom, Not, parse, render
from ecats.trajectory import LabeledSet, Trajectory


def _levels(values_a, values_b, T=6):
    a = [np.full((T, 1), v) for v in values_a]
    b = [np.full((T, 1), v) for v in values_b]
    return a, b


def _oracle_shift(threshold, target, other, grid):
    """Smallest-|eps| grid value after which x_0 <= threshold + eps splits the classes by sign."""
    for eps in sorted(grid, key=lambda e: (abs(e), e)):
        phi = Atom(0, "<=", threshold + eps)
        rt = [brute_robustness(phi, x) for x in target]
        ro = [brute_robustness(phi, x) for x in other]
        if all(r > 0 for r in rt) and all(r < 0 for r in ro):
            return eps, 1
        if all(r < 0 for r in rt) and all(r > 0 for r in ro):
            return eps, -1
    return None, 0


def test_postprocess_constructed_example():
    target, other = _levels([3.0] * 5, [1.0] * 5)
    grid = np.linspace(-4, 4, 41)
    eps, sign = _oracle_shift(0.0, target, other, grid.tolist())
    assert eps == pytest.approx(1.2) and sign == -1
    res = postprocess(parse("x_0 <= 0"), target, other, grid)
    assert res.epsilon == eps
    assert res.formula == parse("x_0 >= 1.2")
    assert res.summary["target_pos"] == 5 and res.summary["other_neg"] == 5


def test_postprocess_zero_shift_keeps_formula():
    target, other = _levels([3.0] * 4, [1.0] * 4)
    phi = parse("x_0 >= 2")
    res = postprocess(phi, target, other, [-1.0, 0.0, 1.0])
    assert res.epsilon == 0.0 and res.formula == phi


def test_postprocess_negates_to_the_target_class():
    target, other = _levels([1.0] * 4, [3.0] * 4)
    res = postprocess(parse("x_0 >= 2"), target, other, [0.0])
    assert res.formula == parse("x_0 <= 2")


def test_postprocess_shift_then_negate():
    T = 30
    high = [np.full((T, 1), 28.8 + k) for k in range(4)]        # target: always fast
    low = [np.full((T, 1), 28.6 - k) for k in range(4)]
    grid = np.round(np.linspace(-10, 10, 201), 2)
    res = postprocess(parse("G[0,24] (x_0 <= 37.3)"), high, low, grid)
    assert res.epsilon == pytest.approx(-8.6)
    assert res.formula == parse("F[0,24] (x_0 >= 28.7)")


def test_postprocess_outlier_allowance():
    target, other = _levels([3.0] * 19 + [0.0], [1.0] * 20)
    strict = postprocess(parse("x_0 >= 2"), target, other, [0.0], outlier_fraction=0.0)
    assert not strict.succeeded and strict.formula == parse("x_0 >= 2")
    loose = postprocess(parse("x_0 >= 2"), target, other, [0.0], outlier_fraction=0.05)
    assert loose.succeeded


def test_postprocess_errors():
    target, other = _levels([1.0], [2.0])
    with pytest.raises(ExplanationError):
        postprocess(parse("x_0 >= 0"), target, [], [0.0])
    with pytest.raises(ExplanationError):
        postprocess(parse("x_0 >= 0"), target, other, [])


def test_default_grid_contains_zero():
    target, other = _levels([0.0, 10.0], [3.3])
    g = default_epsilon_grid(target + other)
    assert 0.0 in g.tolist() and len(g) == 41
    assert g.min() == -5.0 and g.max() == 5.0
    assert np.array_equal(g, np.round(g, 2))


def _bank(formulas, embeddings):
    return SimpleNamespace(formulas=formulas, embeddings=np.asarray(embeddings, dtype=float))


FORMS = [parse("x_0 >= 2"), parse("x_0 >= 2.1"), parse("x_0 <= 0"), parse("F[0,2] x_0 >= 5")]
EMB = [[1.0, 0.0], [0.99, 0.1], [0.0, 1.0], [-1.0, 0.2]]


def test_local_top1_is_argmax():
    w = np.array([0.1, 0.2, 0.6, 0.1])
    le = explain_local(w, np.full(4, 3.0), _bank(FORMS, EMB), k_top=1)
    assert le.selected == [2] and le.formula == FORMS[2]
    assert [e[0] for e in le.entries] == [2, 1, 0, 3]
    assert le.entries[0][3] == -3.0


def test_local_similarity_filter():
    w = np.array([0.3, 0.4, 0.2, 0.1])
    bank = _bank(FORMS, EMB)
    le = explain_local(w, np.full(4, 3.0), bank, k_top=3, sim_threshold=0.9)
    assert le.selected == [1, 2, 3]
    sims = [[np.dot(a, b) / np.linalg.norm(a) / np.linalg.norm(b) for b in EMB] for a in EMB]
    assert all(sims[i][j] < 0.9 for i in le.selected for j in le.selected if i != j)
    pure = explain_local(w, np.full(4, 3.0), bank, k_top=3, sim_threshold=1.0)
    assert pure.selected == [1, 0, 2]
    assert render(pure.formula) == render(parse("x_0 >= 2.1 and x_0 >= 2 and x_0 <= 0"))


def test_local_with_reference_is_positive_on_class():
    ref = LabeledSet([Trajectory(np.full((4, 1), v)) for v in (3.0, 3.5, 0.5, 1.0)], [1, 1, 0, 0])
    w = np.array([0.1, 0.1, 0.7, 0.1])
    le = explain_local(w, np.full(4, 3.0), _bank(FORMS, EMB), k_top=1, predicted_class=1,
                       reference=ref, grid=[-1.0, 0.0, 1.0, 2.0])
    assert le.shift.succeeded
    assert all((r > 0) == (y == 1) for _, y, r in robustness_report(le.formula, ref))
    payload = json.loads(json.dumps(le.to_json()))
    assert parse(payload["formula"]) == le.formula


def test_local_argument_errors():
    with pytest.raises(ExplanationError):
        explain_local([1.0], np.zeros(3), _bank(FORMS[:1], EMB[:1]), k_top=0)
    with pytest.raises(ExplanationError):
        explain_local([1.0], np.zeros(3), _bank(FORMS[:1], EMB[:1]), sim_threshold=2.0)


def _local(idx, weight, cls):
    return LocalExplanation([(idx, FORMS[idx], weight, 0.0)], [idx], FORMS[idx], cls)


def test_global_single_concept():
    ref = LabeledSet([Trajectory(np.full((4, 1), v)) for v in (3.0, 3.5, 0.5, 1.0)], [1, 1, 0, 0])
    locs = [_local(0, 0.8, 1), _local(0, 0.6, 1), _local(2, 0.9, 0)]
    g = explain_global(locs, 1, _bank(FORMS, EMB), reference=ref, grid=[0.0, 1.0])
    assert g.batch == [0, 0] and g.candidates == [0] and g.n_trajectories == 2
    direct = postprocess(FORMS[0], ref.by_class(1), ref.by_class(0), [0.0, 1.0])
    assert g.formula == direct.formula
    assert separation(robustness_report(g.formula, ref), 1) == (1.0, 1.0)


def test_global_ranking_and_filtering():
    locs = [_local(1, 0.5, 1), _local(0, 0.9, 1), _local(1, 0.4, 1), _local(3, 0.9, 1)]
    g = explain_global(locs, 1, _bank(FORMS, EMB))
    assert g.candidates == [1, 3]         # 0 is a near-duplicate of 1
    assert render(g.formula) == render(parse("x_0 >= 2.1 or F[0,2] x_0 >= 5"))


def test_global_without_class_is_an_error():
    with pytest.raises(ExplanationError, match="no trajectories"):
        explain_global([_local(0, 1.0, 0)], 1, _bank(FORMS, EMB))


def test_report_and_negation(tmp_path):
    ref = LabeledSet([Trajectory(np.array([[v], [v + 1]])) for v in (0.0, 2.0, 5.0)], [0, 1, 1], ["a", "b", "c"])
    phi = parse("F[0,1] x_0 >= 2.5")
    rep = robustness_report(phi, ref)
    assert rep == [("a", 0, -1.5), ("b", 1, 0.5), ("c", 1, 3.5)]
    assert [r for *_, r in robustness_report(Not(phi), ref)] == [1.5, -0.5, -3.5]
    assert separation(rep, 1) == (1.0, 1.0)
    write_report(rep, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "traj_id,class,robustness" and lines[1] == "a,0,-1.5"
    assert math.isnan(separation([("a", 0, 1.0)], 1)[0])


def test_global_batch_uses_top_k_entries():
    entries = [(2, FORMS[2], 0.5, 0.0), (3, FORMS[3], 0.3, 0.0), (0, FORMS[0], 0.2, 0.0)]
    locs = [LocalExplanation(entries, [2], FORMS[2], 1)] * 2
    assert explain_global(locs, 1, _bank(FORMS, EMB), k_top=1).batch == [2, 2]
    g = explain_global(locs, 1, _bank(FORMS, EMB), k_top=2)
    assert g.batch == [2, 3, 2, 3] and g.candidates == [2, 3]
    with pytest.raises(ExplanationError):
        explain_global(locs, 1, _bank(FORMS, EMB), k_top=0)
