"""Concept bank construction.

Templates (formulae with symbolic thresholds and interval bounds) are
enumerated by size, instantiated on a parameter grid, pruned per template
by signature-based filtering, embedded with kernel PCA and finally
subsampled with a Latin hypercube in embedding space.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernel as K
from .stl import (GE, LE, And, Atom, Eventually, Formula, Globally, Interval, Not, Or, Top,
                  Until, node_count, parse, render, robustness_signal)
from .trajectory import LabeledSet, Mu0Params

log = logging.getLogger(__name__)

DEFAULT_QUANTILES = tuple(range(5, 100, 10))


class ConceptError(ValueError):
    pass


@dataclass(frozen=True)
class Slot:
    """Symbolic template parameter: an atom threshold or an interval bound."""
    kind: str        # "theta", "lo" or "hi"
    index: int = -1
    var: int = -1

    def __str__(self):
        return {"theta": "θ", "lo": "a", "hi": "b"}[self.kind] + str(self.index)


@dataclass(frozen=True)
class Template:
    formula: Formula
    slots: tuple

    @property
    def param_arity(self) -> int:
        return len(self.slots)

    @property
    def id(self) -> str:
        return render(self.formula)


def _skeleton_key(phi) -> str:
    """Structure of a skeleton with parameters erased; commutative operands sorted."""
    if isinstance(phi, Top):
        return "T"
    if isinstance(phi, Atom):
        return f"x{phi.var}{phi.op}"
    if isinstance(phi, Not):
        return f"!({_skeleton_key(phi.child)})"
    if isinstance(phi, (And, Or)):
        a, b = sorted([_skeleton_key(phi.left), _skeleton_key(phi.right)])
        return f"{type(phi).__name__}({a},{b})"
    if isinstance(phi, (Eventually, Globally)):
        return f"{type(phi).__name__[0]}({_skeleton_key(phi.child)})"
    return f"U({_skeleton_key(phi.left)},{_skeleton_key(phi.right)})"


def _number_slots(phi):
    """Renumber slots in pre-order; returns (formula, slots)."""
    slots: list[Slot] = []

    def interval():
        lo = Slot("lo", len(slots))
        slots.append(lo)
        hi = Slot("hi", len(slots))
        slots.append(hi)
        return Interval(lo, hi)

    def walk(f):
        if isinstance(f, Top):
            return f
        if isinstance(f, Atom):
            s = Slot("theta", len(slots), f.var)
            slots.append(s)
            return Atom(f.var, f.op, s)
        if isinstance(f, Not):
            return Not(walk(f.child))
        if isinstance(f, (And, Or)):
            left = walk(f.left)
            return type(f)(left, walk(f.right))
        if isinstance(f, (Eventually, Globally)):
            iv = interval()
            return type(f)(iv, walk(f.child))
        iv = interval()
        left = walk(f.left)
        return Until(iv, left, walk(f.right))

    out = walk(phi)
    return out, tuple(slots)


def enumerate_templates(max_nodes: int, max_vars: int, operator_nodes: bool = True) -> list[Template]:
    """All template skeletons with at most ``max_nodes`` nodes over ``max_vars`` variables.

    Level 1 holds the atoms ``x_i <= θ`` and ``x_i >= θ``. Level m extends
    level m-1 with F, G and not, and combines levels (l, r), l <= r, with
    and, or and until. With ``operator_nodes`` the binary operator counts as
    a node (l + r = m - 1), so binary combinations first appear at m = 3;
    otherwise l + r = m.
    """
    if max_nodes < 1 or max_vars < 1:
        raise ConceptError("max_nodes and max_vars must be >= 1")
    placeholder = Slot("theta")
    span = Interval(0, 0)  # replaced by slots during numbering
    levels: dict[int, list] = {1: [Atom(i, op, placeholder) for i in range(max_vars) for op in (LE, GE)]}
    seen = {_skeleton_key(f) for f in levels[1]}
    for m in range(2, max_nodes + 1):
        new = []

        def add(f):
            key = _skeleton_key(f)
            if key not in seen:
                seen.add(key)
                new.append(f)

        for f in levels[m - 1]:
            add(Eventually(span, f))
            add(Globally(span, f))
            add(Not(f))
        total = m - 1 if operator_nodes else m
        for l in range(1, total // 2 + 1):
            r = total - l
            for a in levels.get(l, []):
                for b in levels.get(r, []):
                    add(And(a, b))
                    add(Or(a, b))
                    add(Until(span, a, b))
        levels[m] = new
    out = []
    for m in sorted(levels):
        for f in levels[m]:
            numbered, slots = _number_slots(f)
            out.append(Template(numbered, slots))
    return out


@dataclass
class ParameterGrid:
    thresholds: dict            # var index -> list of candidate thresholds
    lo_values: list
    hi_values: list             # may contain None (unbounded)

    def to_json(self) -> dict:
        return {"thresholds": {str(k): list(v) for k, v in self.thresholds.items()},
                "lo_values": list(self.lo_values), "hi_values": list(self.hi_values)}


def default_grid(values: np.ndarray, length: int, quantiles=DEFAULT_QUANTILES, decimals: int | None = 2) -> ParameterGrid:
    """Threshold quantiles of pooled ``values`` (shape (..., n)) and a quarter-length time grid."""
    pooled = np.asarray(values, dtype=float).reshape(-1, np.shape(values)[-1])
    thresholds = {}
    for i in range(pooled.shape[1]):
        q = np.percentile(pooled[:, i], list(quantiles))
        if decimals is not None:
            q = np.round(q, decimals)
        thresholds[i] = sorted({float(v) for v in q})
    quarter = [length // 4, length // 2, (3 * length) // 4]
    lo_values = sorted({0, *quarter})
    hi_values = sorted({*quarter, length - 1}) + [None]
    return ParameterGrid(thresholds, lo_values, hi_values)


def _substitute(phi, values: dict):
    if isinstance(phi, Top):
        return phi
    if isinstance(phi, Atom):
        return Atom(phi.var, phi.op, float(values[phi.threshold.index]))
    if isinstance(phi, Not):
        return Not(_substitute(phi.child, values))
    if isinstance(phi, (And, Or)):
        return type(phi)(_substitute(phi.left, values), _substitute(phi.right, values))
    iv = Interval(values[phi.interval.lo.index], values[phi.interval.hi.index])
    if isinstance(phi, (Eventually, Globally)):
        return type(phi)(iv, _substitute(phi.child, values))
    return Until(iv, _substitute(phi.left, values), _substitute(phi.right, values))


def instantiate_with_params(template: Template, grid: ParameterGrid) -> list[tuple[Formula, tuple]]:
    choices = []
    for s in template.slots:
        if s.kind == "theta":
            opts = list(grid.thresholds.get(s.var, []))
        elif s.kind == "lo":
            opts = list(grid.lo_values)
        else:
            opts = list(grid.hi_values)
        if not opts:
            raise ConceptError(f"empty parameter grid for slot {s} of template {template.id}")
        choices.append(opts)
    out = []
    for combo in itertools.product(*choices):
        values = dict(enumerate(combo))
        ok = True
        for s in template.slots:
            if s.kind == "hi":
                lo, hi = values[s.index - 1], values[s.index]
                if hi is not None and lo > hi:
                    ok = False
                    break
        if ok:
            out.append((_substitute(template.formula, values), combo))
    return out


def instantiate(template: Template, grid: ParameterGrid) -> list[Formula]:
    """Cartesian product of grid values over the template's slots; lo > hi combos skipped."""
    return [f for f, _ in instantiate_with_params(template, grid)]


def _probe_array(probes) -> np.ndarray:
    if isinstance(probes, K.SignatureBasis):
        return probes.values
    if isinstance(probes, np.ndarray):
        return probes if probes.ndim == 3 else probes[None]
    return np.stack([p.values for p in probes])


def signature_matrix(candidates, probes, clamp: float = K.DEFAULT_CLAMP, drop_nonfinite: bool = False):
    """Rows S[i, j] = robustness of candidate i on probe j at t=0.

    With ``drop_nonfinite`` rows with an infinite raw entry (an empty
    window somewhere below the root) are returned as NaN instead of clipped.
    """
    X = _probe_array(probes)
    cache: dict = {}
    S = np.empty((len(candidates), X.shape[0]))
    for i, phi in enumerate(candidates):
        r = robustness_signal(phi, X, cache)[:, 0]
        cache.pop(phi, None)  # keep shared sub-formulae only
        if drop_nonfinite and not np.all(np.isfinite(r)):
            S[i] = np.nan
        else:
            S[i] = np.clip(r, -clamp, clamp)
    return S


def signature_filter_indices(S: np.ndarray, tau: float) -> list[int]:
    """Greedy pass: keep row i iff its cosine distance to every kept row exceeds ``tau``."""
    if tau < 0:
        raise ConceptError("tau must be non-negative")
    kept: list[int] = []
    unit = np.empty_like(S)
    for i in range(S.shape[0]):
        row = S[i]
        if not np.all(np.isfinite(row)):
            warnings.warn(f"candidate {i} has a non-finite signature (empty window); dropped", stacklevel=2)
            continue
        norm = np.linalg.norm(row)
        if norm == 0:
            warnings.warn(f"candidate {i} has a zero-norm signature; dropped", stacklevel=2)
            continue
        u = row / norm
        if kept:
            dist = 1.0 - unit[kept] @ u
            if np.any(dist <= tau):
                continue
        unit[i] = u
        kept.append(i)
    return kept


def signature_filter(candidates, probes, tau: float = 0.9, clamp: float = K.DEFAULT_CLAMP) -> list[Formula]:
    if len(_probe_array(probes)) == 0:
        raise ConceptError("signature filtering needs at least one probe trajectory")
    S = signature_matrix(candidates, probes, clamp)
    return [candidates[i] for i in signature_filter_indices(S, tau)]


def latin_hypercube(m: int, lo: np.ndarray, hi: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """m points in the box [lo, hi]: one uniform draw per equal-width bin, bins permuted per axis."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    d = lo.shape[0]
    pts = np.empty((m, d))
    for j in range(d):
        perm = rng.permutation(m)
        u = rng.random(m)
        pts[:, j] = lo[j] + (perm + u) / m * (hi[j] - lo[j])
    return pts


def lhs_select(embeddings: np.ndarray, m: int, seed, return_points: bool = False):
    """Pick ``m`` distinct concepts nearest to Latin hypercube points in the embedding box."""
    E = np.asarray(embeddings, dtype=float)
    C = E.shape[0]
    if m < 1 or m > C:
        raise ConceptError(f"cannot select {m} concepts out of {C}")
    rng = np.random.default_rng(seed)
    pts = latin_hypercube(m, E.min(axis=0), E.max(axis=0), rng)
    d2 = ((pts[:, None, :] - E[None, :, :]) ** 2).sum(axis=-1)  # (m, C)
    nearest = np.argmin(d2, axis=1)
    chosen: list[int] = []
    used = np.zeros(C, dtype=bool)
    pending = []
    for p, c in enumerate(nearest):
        if used[c]:
            pending.append(p)
        else:
            used[c] = True
            chosen.append(int(c))
    for p in pending:
        order = np.argsort(d2[p], kind="stable")
        c = next(int(c) for c in order if not used[c])
        used[c] = True
        chosen.append(c)
    idx = np.asarray(chosen, dtype=int)
    return (idx, pts) if return_points else idx


# ---------------------------------------------------------------------------

@dataclass
class BankConfig:
    max_nodes: int = 3
    max_vars: int | None = None      # default: dimensionality of the data/basis
    tau: float = 0.9
    bank_size: int = 256
    basis_size: int = K.DEFAULT_BASIS_SIZE
    probe_size: int = 1000           # leading basis trajectories used as signature probes
    embed_dim: int = 30
    seed: int = 0
    clamp: float = K.DEFAULT_CLAMP
    quantiles: tuple = DEFAULT_QUANTILES
    threshold_decimals: int | None = 2
    operator_nodes: bool = True


@dataclass
class ConceptBank:
    formulas: list
    embeddings: np.ndarray                       # (C, d)
    provenance: list = field(default_factory=list)   # per formula: {"template": id, "params": [...]}
    metadata: dict = field(default_factory=dict)
    kpca: K.KpcaModel | None = None
    basis: K.SignatureBasis | None = None
    pool_formulas: list | None = None
    pool_provenance: list | None = None
    lhs_points: np.ndarray | None = None

    def __len__(self):
        return len(self.formulas)

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(render(f) for f in self.formulas).encode())
        h.update(np.ascontiguousarray(self.embeddings).tobytes())
        return h.hexdigest()[:16]

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "concepts.txt").write_text("".join(render(f) + "\n" for f in self.formulas), encoding="utf-8")
        K.save_matrix(d / "embeddings.csv", self.embeddings)
        meta = dict(self.metadata)
        meta["provenance"] = self.provenance
        meta["digest"] = self.digest()
        (d / "bank.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "ConceptBank":
        d = Path(directory)
        lines = (d / "concepts.txt").read_text(encoding="utf-8").splitlines()
        formulas = [parse(s) for s in lines if s.strip()]
        E = K.load_matrix(d / "embeddings.csv")
        meta = json.loads((d / "bank.json").read_text(encoding="utf-8"))
        prov = meta.pop("provenance", [])
        meta.pop("digest", None)
        if E.shape[0] != len(formulas):
            raise ConceptError(f"{d}: {len(formulas)} formulae but {E.shape[0]} embedding rows")
        return cls(formulas, E, prov, meta)


def data_scaled_basis(data: LabeledSet, size: int, seed: int) -> K.SignatureBasis:
    """mu0 basis on the time axis of ``data`` and mapped to its per-variable mean/std."""
    X = data.array()
    T, n = X.shape[1], X.shape[2]
    pooled = X.reshape(-1, n)
    std = pooled.std(axis=0)
    std[std == 0] = 1.0
    params = Mu0Params(a=0.0, b=float(T - 1), delta=1.0, n_dims=n)
    return K.SignatureBasis.sample(size, params, seed, offset=pooled.mean(axis=0), scale=std)


def build_concept_bank(config: BankConfig, data: LabeledSet | None = None) -> ConceptBank:
    """enumerate -> instantiate -> per-template signature filter -> kernel PCA -> LHS selection.

    With ``data`` the basis shares the data's time axis and scale and the
    threshold grid comes from the data's pooled quantiles; without it the
    default mu0 basis is used for both.
    """
    if data is not None:
        basis = data_scaled_basis(data, config.basis_size, config.seed)
        grid_values = data.array()
    else:
        basis = K.SignatureBasis.sample(config.basis_size, Mu0Params(), config.seed)
        grid_values = basis.values
    T, n = basis.values.shape[1], basis.n_dims
    max_vars = config.max_vars or n
    grid = default_grid(grid_values, T, config.quantiles, config.threshold_decimals)
    templates = enumerate_templates(config.max_nodes, max_vars, config.operator_nodes)
    probes = basis.values[: max(1, min(config.probe_size, basis.size))]

    pool: list[Formula] = []
    prov: list[dict] = []
    for k, tpl in enumerate(templates):
        cands = instantiate_with_params(tpl, grid)
        # the greedy filter favours early candidates; a seeded shuffle keeps it from
        # always preferring the first grid values (short windows, lowest thresholds)
        order = np.random.default_rng([config.seed, 2, k]).permutation(len(cands))
        cands = [cands[i] for i in order]
        formulas = [f for f, _ in cands]
        S = signature_matrix(formulas, probes, config.clamp, drop_nonfinite=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            keep = signature_filter_indices(S, config.tau)
        for i in keep:
            pool.append(formulas[i])
            prov.append({"template": tpl.id, "params": [None if v is None else v for v in cands[i][1]]})
        log.debug("template %s: %d candidates, %d kept", tpl.id, len(formulas), len(keep))
    if not pool:
        raise ConceptError("no concepts survived signature filtering")

    R = K.robustness_matrix(pool, basis, config.clamp)
    alive = np.einsum("ij,ij->i", R, R) > 0
    if not np.all(alive):
        pool = [f for f, a in zip(pool, alive) if a]
        prov = [p for p, a in zip(prov, alive) if a]
        R = R[alive]
    G = K.GramMatrix(K.gram_from_vectors(R, True), True, pool)
    rank = int(np.sum(np.linalg.eigvalsh(K.center_gram(G.matrix)) > K.EIG_FLOOR))
    d = min(config.embed_dim, rank)
    model = K.kpca_fit(G, d, train_robustness=R, clamp=config.clamp)
    pool_emb = model.training_embeddings()
    sel, pts = lhs_select(pool_emb, config.bank_size, np.random.default_rng([config.seed, 1]), return_points=True)

    meta = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
        "basis": basis.metadata(),
        "grid": grid.to_json(),
        "pool_size": len(pool),
        "n_templates": len(templates),
        "embed_dim": d,
        "spectral_mass": model.spectral_mass(),
        "selection": [int(i) for i in sel],
    }
    return ConceptBank(
        [pool[i] for i in sel], pool_emb[sel].copy(), [prov[i] for i in sel], meta,
        kpca=model, basis=basis, pool_formulas=pool, pool_provenance=prov, lhs_points=pts,
    )


def bank_node_counts(bank: ConceptBank) -> list[int]:
    return [node_count(f) for f in bank.formulas]
