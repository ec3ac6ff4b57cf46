"""Local and global STL explanations from attention, plus readability post-processing."""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .kernel import similarity_matrix
from .stl import And, Formula, Or, negate, render, robustness_signal, shift_thresholds, simplify
from .trajectory import LabeledSet


class ExplanationError(ValueError):
    pass


@dataclass
class ShiftResult:
    epsilon: float | None          # None: no grid value separated the classes
    formula: Formula
    summary: dict                  # robustness sign counts per class for the returned formula
    original: Formula | None = None

    @property
    def succeeded(self) -> bool:
        return self.epsilon is not None


@dataclass
class LocalExplanation:
    entries: list                  # [(concept index, formula, attention weight, robustness)], by weight desc
    selected: list                 # concept indices of the kept subset
    formula: Formula               # conjunction of the kept subset, post-processed when possible
    predicted_class: int
    trajectory_id: str | None = None
    shift: ShiftResult | None = None

    def to_json(self) -> dict:
        return {
            "trajectory_id": self.trajectory_id,
            "predicted_class": int(self.predicted_class),
            "formula": render(self.formula),
            "epsilon": None if self.shift is None else self.shift.epsilon,
            "entries": [{"concept": int(i), "formula": render(f), "attention": float(w), "robustness": float(r),
                         "selected": int(i) in self.selected} for i, f, w, r in self.entries],
        }


@dataclass
class GlobalExplanation:
    label: int
    formula: Formula
    survivors: list                # post-processed ShiftResults that were disjoined
    batch: list                    # top-k concept indices of every contributing trajectory
    n_trajectories: int
    candidates: list = field(default_factory=list)   # filtered batch, concept indices

    def to_json(self) -> dict:
        return {
            "class": int(self.label),
            "formula": render(self.formula),
            "n_trajectories": self.n_trajectories,
            "batch_counts": {str(k): v for k, v in sorted(Counter(self.batch).items())},
            "survivors": [{"formula": render(s.formula), "original": render(s.original) if s.original else None,
                           "epsilon": s.epsilon, "summary": s.summary} for s in self.survivors],
        }


def robustness_at_zero(phi: Formula, trajectories) -> np.ndarray:
    if isinstance(trajectories, LabeledSet):
        X = trajectories.array()
    elif isinstance(trajectories, np.ndarray):
        X = trajectories
    else:
        X = np.stack([getattr(t, "values", t) for t in trajectories])
    if X.ndim == 2:
        X = X[:, :, None]
    return robustness_signal(phi, X)[:, 0]


def default_epsilon_grid(trajectories, points: int = 41, decimals: int | None = 2) -> np.ndarray:
    """Symmetric grid over +-(pooled range)/2 containing exactly 0, rounded for readable thresholds."""
    X = np.concatenate([np.ravel(getattr(t, "values", t)) for t in trajectories])
    half = (X.max() - X.min()) / 2
    grid = np.linspace(-half, half, points)
    if decimals is not None:
        grid = np.round(grid, decimals)
    grid[np.argmin(np.abs(grid))] = 0.0
    return grid


def _sign_summary(r_target: np.ndarray, r_other: np.ndarray) -> dict:
    return {"target_pos": int(np.sum(r_target > 0)), "target_neg": int(np.sum(r_target < 0)),
            "target_zero": int(np.sum(r_target == 0)), "other_pos": int(np.sum(r_other > 0)),
            "other_neg": int(np.sum(r_other < 0)), "other_zero": int(np.sum(r_other == 0))}


def postprocess(phi: Formula, target_class_set, other_class_set, grid=None,
                outlier_fraction: float = 0.05, decimals: int | None = 10) -> ShiftResult:
    """Shift thresholds by the smallest grid epsilon that splits the classes by robustness sign.

    Candidates are tried in order of |epsilon|. One is accepted when, for
    some sign s, the target class has robustness sign s and the other class
    sign -s, allowing at most ``outlier_fraction`` of all trajectories to
    violate this (zero counts as a violation). A formula that ends up
    negative on the target class is negated, then simplified.
    """
    target = list(target_class_set)
    other = list(other_class_set)
    if not target or not other:
        raise ExplanationError("post-processing needs trajectories from both classes")
    grid = default_epsilon_grid(target + other) if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ExplanationError("empty epsilon grid")
    allowed = int(np.floor(outlier_fraction * (len(target) + len(other)) + 1e-9))
    Xt = np.stack([getattr(t, "values", t) for t in target])
    Xo = np.stack([getattr(t, "values", t) for t in other])
    for eps in sorted(grid.tolist(), key=lambda e: (abs(e), e)):
        shifted = shift_thresholds(phi, eps, decimals)
        rt, ro = robustness_at_zero(shifted, Xt), robustness_at_zero(shifted, Xo)
        for s in (1, -1):
            bad = int(np.sum(s * rt <= 0) + np.sum(s * ro >= 0))
            if bad <= allowed:
                out = shifted if s == 1 else negate(shifted)
                out = simplify(out)
                summary = _sign_summary(robustness_at_zero(out, Xt), robustness_at_zero(out, Xo))
                return ShiftResult(float(eps), out, summary, phi)
    return ShiftResult(None, phi, _sign_summary(robustness_at_zero(phi, Xt), robustness_at_zero(phi, Xo)), phi)


def _conjunction(formulas):
    out = formulas[0]
    for f in formulas[1:]:
        out = And(out, f)
    return out


def _disjunction(formulas):
    out = formulas[0]
    for f in formulas[1:]:
        out = Or(out, f)
    return out


def _class_split(reference: LabeledSet, label: int):
    target = reference.by_class(label)
    other = [t for t, y in zip(reference.trajectories, reference.labels) if y != label]
    return target, other


def explain_local(att, xi, bank, k_top: int = 3, sim_threshold: float = 0.9,
                  predicted_class: int = 1, reference: LabeledSet | None = None,
                  grid=None, outlier_fraction: float = 0.05, trajectory_id=None) -> LocalExplanation:
    """Rank concepts by attention and keep up to ``k_top`` mutually dissimilar ones.

    A concept is kept when its embedding cosine similarity to every kept
    concept is below ``sim_threshold``. The explanation is the conjunction
    of the kept concepts; with a labeled ``reference`` set it is
    post-processed to be positive on ``predicted_class``.
    """
    weights = np.asarray(getattr(att, "weights", att), dtype=float)
    if len(bank.formulas) == 0:
        raise ExplanationError("empty concept bank")
    if k_top < 1:
        raise ExplanationError("k_top must be >= 1")
    if not -1 <= sim_threshold <= 1:
        raise ExplanationError("sim_threshold must lie in [-1, 1]")
    order = np.argsort(-weights, kind="stable")
    sims = similarity_matrix(bank.embeddings)
    X = np.asarray(getattr(xi, "values", xi), dtype=float)
    rob = robustness_at_zero_many(bank.formulas, X)
    entries = [(int(i), bank.formulas[i], float(weights[i]), float(rob[i])) for i in order]
    selected: list[int] = []
    for i in order:
        if len(selected) == k_top:
            break
        if all(sims[i, j] < sim_threshold for j in selected):
            selected.append(int(i))
    phi = _conjunction([bank.formulas[i] for i in selected])
    shift = None
    if reference is not None:
        target, other = _class_split(reference, predicted_class)
        if target and other:
            shift = postprocess(phi, target, other, grid, outlier_fraction)
            phi = shift.formula
    return LocalExplanation(entries, selected, phi, int(predicted_class), trajectory_id, shift)


def robustness_at_zero_many(formulas, x: np.ndarray) -> np.ndarray:
    X = x if x.ndim == 3 else (x[None] if x.ndim == 2 else x[None, :, None])
    cache: dict = {}
    return np.array([robustness_signal(f, X, cache)[0, 0] for f in formulas])


def explain_global(locals_: list, label: int, bank, sim_threshold: float = 0.9,
                   reference: LabeledSet | None = None, grid=None,
                   outlier_fraction: float = 0.05, k_top: int = 3) -> GlobalExplanation:
    """Condense the highest-attention concepts of one class's local explanations.

    The ``k_top`` highest-attention concepts of every local explanation
    predicted as ``label`` form the batch, before any similarity filtering.
    Distinct concepts are ordered by frequency, then mean attention, and
    greedily filtered by embedding similarity. Survivors are post-processed
    against ``reference``; those that separate the classes are disjoined
    (all survivors are, when none separates).
    """
    if k_top < 1:
        raise ExplanationError("k_top must be >= 1")
    mine = [le for le in locals_ if le.predicted_class == label]
    if not mine:
        raise ExplanationError(f"no trajectories explained as class {label}")
    batch = [e[0] for le in mine for e in le.entries[:k_top]]
    weight: dict[int, list] = {}
    for le in mine:
        for i, _, w, _ in le.entries[:k_top]:
            weight.setdefault(i, []).append(w)
    counts = Counter(batch)
    ranked = sorted(counts, key=lambda i: (-counts[i], -float(np.mean(weight[i])), i))
    sims = similarity_matrix(bank.embeddings)
    kept: list[int] = []
    for i in ranked:
        if all(sims[i, j] < sim_threshold for j in kept):
            kept.append(i)
    results = []
    if reference is not None:
        target, other = _class_split(reference, label)
        if not target or not other:
            raise ExplanationError("reference set must contain both classes")
        results = [postprocess(bank.formulas[i], target, other, grid, outlier_fraction) for i in kept]
        good = [r for r in results if r.succeeded]
        survivors = good or results
    else:
        survivors = [ShiftResult(None, bank.formulas[i], {}, bank.formulas[i]) for i in kept]
    phi = _disjunction([s.formula for s in survivors])
    return GlobalExplanation(label, phi, survivors, batch, len(mine), kept)


def robustness_report(phi: Formula, data: LabeledSet) -> list[tuple]:
    """Rows (traj_id, class, robustness at t=0)."""
    r = robustness_at_zero(phi, data)
    return [(tid, int(y), float(v)) for tid, y, v in zip(data.ids, data.labels, r)]


def separation(report: list[tuple], label: int) -> tuple[float, float]:
    """Fraction of class ``label`` rows with rho > 0 and of other rows with rho < 0."""
    own = [r for _, y, r in report if y == label]
    other = [r for _, y, r in report if y != label]
    frac_own = float(np.mean([r > 0 for r in own])) if own else float("nan")
    frac_other = float(np.mean([r < 0 for r in other])) if other else float("nan")
    return frac_own, frac_other


def write_report(report: list[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "class", "robustness"])
        for tid, y, r in report:
            w.writerow([tid, y, repr(r)])


def write_json(obj: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
