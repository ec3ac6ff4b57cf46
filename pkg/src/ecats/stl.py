"""Signal Temporal Logic: formula AST, text grammar, semantics and rewrites.

Time is discrete: interval bounds are sampling-step offsets. Quantitative
semantics are evaluated on whole batches of signals at once, producing the
robustness at every time index; ``eval_robustness`` reads off a single entry.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Top", "Atom", "Not", "And", "Or", "Eventually", "Globally", "Until",
    "Interval", "Formula", "STLSyntaxError", "EvaluationError",
    "parse", "render", "eval_boolean", "eval_robustness", "robustness_signal",
    "negate", "shift_thresholds", "simplify", "node_count", "atoms",
]

LE = "<="
GE = ">="


class STLSyntaxError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Interval:
    lo: int
    hi: int | None = None  # None: unbounded, clipped to the end of the signal

    def __post_init__(self):
        if isinstance(self.lo, int) and self.lo < 0:
            raise ValueError(f"interval lower bound must be >= 0, got {self.lo}")
        if isinstance(self.lo, int) and isinstance(self.hi, int) and self.hi < self.lo:
            raise ValueError(f"malformed interval [{self.lo},{self.hi}]: lo > hi")

    def __str__(self):
        hi = "inf" if self.hi is None else self.hi
        return f"[{self.lo},{hi}]"


@dataclass(frozen=True)
class Top:
    pass


@dataclass(frozen=True)
class Atom:
    var: int
    op: str
    threshold: float

    def __post_init__(self):
        if self.op not in (LE, GE):
            raise ValueError(f"unknown comparison {self.op!r}")


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Eventually:
    interval: Interval
    child: "Formula"


@dataclass(frozen=True)
class Globally:
    interval: Interval
    child: "Formula"


@dataclass(frozen=True)
class Until:
    interval: Interval
    left: "Formula"
    right: "Formula"


Formula = Union[Top, Atom, Not, And, Or, Eventually, Globally, Until]


def children(phi: Formula) -> tuple:
    if isinstance(phi, (Top, Atom)):
        return ()
    if isinstance(phi, (Not, Eventually, Globally)):
        return (phi.child,)
    return (phi.left, phi.right)


def node_count(phi: Formula) -> int:
    return 1 + sum(node_count(c) for c in children(phi))


def atoms(phi: Formula) -> list[Atom]:
    if isinstance(phi, Atom):
        return [phi]
    return [a for c in children(phi) for a in atoms(c)]


def max_var(phi: Formula) -> int:
    """Largest variable index used by ``phi`` (-1 if none)."""
    return max((a.var for a in atoms(phi)), default=-1)


# ---------------------------------------------------------------------------
# Text grammar

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<temporal>[FGU])\s*\[\s*(?P<lo>\d+)\s*,\s*(?P<hi>\d+|inf)\s*\]
  | (?P<var>x_\d+)
  | (?P<cmp><=|>=)
  | (?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
  | (?P<word>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<lpar>\()
  | (?P<rpar>\))
""", re.VERBOSE)

_KEYWORDS = {"true", "not", "and", "or"}


def _tokenize(text: str):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise STLSyntaxError(f"unexpected character {text[pos]!r}", _byte_offset(text, pos))
        kind = "temporal" if m.group("temporal") else m.lastgroup
        if kind != "ws":
            out.append((kind, m, _byte_offset(text, pos)))
        pos = m.end()
    out.append(("eof", None, _byte_offset(text, len(text))))
    return out


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def is_word(self, word: str) -> bool:
        kind, m, _ = self.peek()
        return kind == "word" and m.group(0) == word

    def parse(self) -> Formula:
        phi = self.disjunction()
        kind, m, off = self.peek()
        if kind != "eof":
            raise STLSyntaxError(f"unexpected token {m.group(0)!r}", off)
        return phi

    def disjunction(self) -> Formula:
        phi = self.conjunction()
        while self.is_word("or"):
            self.take()
            phi = Or(phi, self.conjunction())
        return phi

    def conjunction(self) -> Formula:
        phi = self.until()
        while self.is_word("and"):
            self.take()
            phi = And(phi, self.until())
        return phi

    def until(self) -> Formula:
        phi = self.unary()
        while True:
            kind, m, off = self.peek()
            if kind == "temporal" and m.group("temporal") == "U":
                self.take()
                phi = Until(_interval(m, off), phi, self.unary())
            else:
                return phi

    def unary(self) -> Formula:
        kind, m, off = self.peek()
        if kind == "word" and m.group(0) == "not":
            self.take()
            return Not(self.unary())
        if kind == "temporal" and m.group("temporal") in "FG":
            self.take()
            cls = Eventually if m.group("temporal") == "F" else Globally
            return cls(_interval(m, off), self.unary())
        return self.primary()

    def primary(self) -> Formula:
        kind, m, off = self.take()
        if kind == "lpar":
            phi = self.disjunction()
            kind, m2, off2 = self.take()
            if kind != "rpar":
                raise STLSyntaxError("expected ')'", off2)
            return phi
        if kind == "word" and m.group(0) == "true":
            return Top()
        if kind == "var":
            var = int(m.group(0)[2:])
            ckind, cm, coff = self.take()
            if ckind != "cmp":
                raise STLSyntaxError("expected '<=' or '>='", coff)
            nkind, nm, noff = self.take()
            if nkind != "num":
                raise STLSyntaxError("expected a number", noff)
            value = float(nm.group(0))
            if not math.isfinite(value):
                raise STLSyntaxError("threshold must be finite", noff)
            return Atom(var, cm.group(0), value)
        if kind == "word" and m.group(0) not in _KEYWORDS:
            raise STLSyntaxError(f"unknown variable {m.group(0)!r} (expected x_<k>)", off)
        if kind == "eof":
            raise STLSyntaxError("unexpected end of input", off)
        raise STLSyntaxError(f"unexpected token {m.group(0)!r}", off)


def _interval(m: re.Match, off: int) -> Interval:
    lo = int(m.group("lo"))
    hi = None if m.group("hi") == "inf" else int(m.group("hi"))
    if hi is not None and lo > hi:
        raise STLSyntaxError(f"malformed interval [{lo},{hi}]: lo > hi", off)
    return Interval(lo, hi)


def parse(text: str) -> Formula:
    """Parse the ASCII formula grammar, e.g. ``"G[0,24] (x_0 <= 37.3)"``."""
    return _Parser(text).parse()


# precedence levels, higher binds tighter
_PREC_OR, _PREC_AND, _PREC_UNTIL, _PREC_UNARY, _PREC_ATOM = range(5)


def _prec(phi: Formula) -> int:
    if isinstance(phi, Or):
        return _PREC_OR
    if isinstance(phi, And):
        return _PREC_AND
    if isinstance(phi, Until):
        return _PREC_UNTIL
    if isinstance(phi, (Not, Eventually, Globally)):
        return _PREC_UNARY
    return _PREC_ATOM


def _fmt_threshold(c) -> str:
    return repr(float(c)) if isinstance(c, (int, float, np.floating)) else str(c)


def render(phi: Formula) -> str:
    """Canonical text form; ``parse(render(phi)) == phi``."""
    if isinstance(phi, Top):
        return "true"
    if isinstance(phi, Atom):
        return f"x_{phi.var} {phi.op} {_fmt_threshold(phi.threshold)}"
    if isinstance(phi, (Not, Eventually, Globally)):
        head = "not" if isinstance(phi, Not) else f"{'F' if isinstance(phi, Eventually) else 'G'}{phi.interval}"
        child = phi.child
        # atoms contain spaces; bracket them (and anything looser) under unary operators
        inner = render(child)
        if _prec(child) < _PREC_UNARY or isinstance(child, Atom):
            inner = f"({inner})"
        return f"{head} {inner}"
    if isinstance(phi, Until):
        op = f"U{phi.interval}"
    else:
        op = "and" if isinstance(phi, And) else "or"
    p = _prec(phi)
    left, right = render(phi.left), render(phi.right)
    if _prec(phi.left) < p:
        left = f"({left})"
    if _prec(phi.right) <= p and not isinstance(phi.right, (Top, Atom)):
        right = f"({right})"
    return f"{left} {op} {right}"


# ---------------------------------------------------------------------------
# Quantitative semantics, vectorised over (batch, time)

def _as_batch(values) -> np.ndarray:
    x = np.asarray(getattr(values, "values", values), dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise EvaluationError(f"expected (T, n) or (B, T, n) signal array, got shape {x.shape}")
    return x


def _shift(r: np.ndarray, k: int, fill: float) -> np.ndarray:
    """out[..., t] = r[..., t + k], padded with ``fill`` past the end."""
    if k == 0:
        return r
    out = np.full_like(r, fill)
    if k < r.shape[-1]:
        out[..., : r.shape[-1] - k] = r[..., k:]
    return out


def _window_reduce(r: np.ndarray, interval: Interval, reduce, identity: float) -> np.ndarray:
    """out[..., t] = reduce(r[..., t+lo : t+hi+1]) with the window clipped to the signal end."""
    T = r.shape[-1]
    lo = interval.lo
    if interval.hi is None:
        # suffix reduction, then offset by lo
        suffix = reduce.accumulate(r[..., ::-1], axis=-1)[..., ::-1]
        return _shift(suffix, lo, identity)
    width = min(interval.hi, T - 1 + lo) - lo + 1
    shifted = _shift(r, lo, identity)
    # doubling scheme: O(T log w) running reduction over a sliding window
    acc = shifted
    span = 1
    while span * 2 <= width:
        acc = reduce(acc, _shift(acc, span, identity))
        span *= 2
    if span < width:
        acc = reduce(acc, _shift(acc, width - span, identity))
    return acc


def _until(r1: np.ndarray, r2: np.ndarray, interval: Interval) -> np.ndarray:
    T = r1.shape[-1]
    hi = T - 1 if interval.hi is None else min(interval.hi, T - 1)
    out = np.full_like(r1, -np.inf)
    running = r1.copy()  # running[..., t] = min of r1 over [t, t+k]
    for k in range(0, hi + 1):
        n = T - k
        if k:
            np.minimum(running[..., :n], r1[..., k:], out=running[..., :n])
        if k >= interval.lo:
            np.maximum(out[..., :n], np.minimum(r2[..., k:], running[..., :n]), out=out[..., :n])
    return out


def _signal(phi: Formula, x: np.ndarray, cache: dict | None) -> np.ndarray:
    if cache is not None:
        hit = cache.get(phi)
        if hit is not None:
            return hit
    if isinstance(phi, Top):
        r = np.full(x.shape[:2], np.inf)
    elif isinstance(phi, Atom):
        if phi.var >= x.shape[2]:
            raise EvaluationError(f"variable x_{phi.var} out of range for {x.shape[2]}-dimensional signal")
        col = x[:, :, phi.var]
        r = phi.threshold - col if phi.op == LE else col - phi.threshold
    elif isinstance(phi, Not):
        r = -_signal(phi.child, x, cache)
    elif isinstance(phi, And):
        r = np.minimum(_signal(phi.left, x, cache), _signal(phi.right, x, cache))
    elif isinstance(phi, Or):
        r = np.maximum(_signal(phi.left, x, cache), _signal(phi.right, x, cache))
    elif isinstance(phi, Eventually):
        r = _window_reduce(_signal(phi.child, x, cache), phi.interval, np.maximum, -np.inf)
    elif isinstance(phi, Globally):
        r = _window_reduce(_signal(phi.child, x, cache), phi.interval, np.minimum, np.inf)
    elif isinstance(phi, Until):
        r = _until(_signal(phi.left, x, cache), _signal(phi.right, x, cache), phi.interval)
    else:
        raise TypeError(f"not a formula: {phi!r}")
    if cache is not None:
        cache[phi] = r
    return r


def robustness_signal(phi: Formula, signals, cache: dict | None = None) -> np.ndarray:
    """Robustness at every time index for a batch of signals.

    ``signals`` is a Trajectory, a (T, n) array or a (B, T, n) array; the
    result has shape (B, T). Windows running past the end of the signal are
    clipped; a window that is empty after clipping contributes the identity
    of its reduction (-inf for F and U, +inf for G). ``cache`` may be shared
    across calls on the same signals to reuse common sub-formulae.
    """
    return _signal(phi, _as_batch(signals), cache)


def _check_top_window(phi: Formula, t: int, T: int):
    if isinstance(phi, (Eventually, Globally, Until)) and t + phi.interval.lo > T - 1:
        raise EvaluationError(
            f"degenerate interval {phi.interval} at t={t}: window is empty for a signal of length {T}")


def eval_robustness(phi: Formula, xi, t: int = 0) -> float:
    """Robustness of ``phi`` on a single trajectory at time index ``t``."""
    x = _as_batch(xi)
    if x.shape[0] != 1:
        raise EvaluationError("eval_robustness takes a single trajectory")
    T = x.shape[1]
    if not 0 <= t < T:
        raise EvaluationError(f"time index {t} out of range [0, {T})")
    _check_top_window(phi, t, T)
    return float(robustness_signal(phi, x)[0, t])


def eval_boolean(phi: Formula, xi, t: int = 0) -> bool:
    """Boolean satisfaction, computed directly from the Boolean semantics."""
    x = _as_batch(xi)
    if x.shape[0] != 1:
        raise EvaluationError("eval_boolean takes a single trajectory")
    x = x[0]
    T, n = x.shape
    if not 0 <= t < T:
        raise EvaluationError(f"time index {t} out of range [0, {T})")
    if max_var(phi) >= n:
        raise EvaluationError(f"variable x_{max_var(phi)} out of range for {n}-dimensional signal")
    _check_top_window(phi, t, T)
    memo: dict = {}

    def window(interval: Interval, s: int) -> range:
        hi = T - 1 if interval.hi is None else min(s + interval.hi, T - 1)
        return range(s + interval.lo, hi + 1)

    def sat(f: Formula, s: int) -> bool:
        key = (id(f), s)
        if key in memo:
            return memo[key]
        if isinstance(f, Top):
            v = True
        elif isinstance(f, Atom):
            v = x[s, f.var] <= f.threshold if f.op == LE else x[s, f.var] >= f.threshold
        elif isinstance(f, Not):
            v = not sat(f.child, s)
        elif isinstance(f, And):
            v = sat(f.left, s) and sat(f.right, s)
        elif isinstance(f, Or):
            v = sat(f.left, s) or sat(f.right, s)
        elif isinstance(f, Eventually):
            v = any(sat(f.child, u) for u in window(f.interval, s))
        elif isinstance(f, Globally):
            v = all(sat(f.child, u) for u in window(f.interval, s))
        else:
            v = any(sat(f.right, u) and all(sat(f.left, w) for w in range(s, u + 1))
                    for u in window(f.interval, s))
        memo[key] = bool(v)
        return memo[key]

    return sat(phi, t)


# ---------------------------------------------------------------------------
# Structural transforms

def negate(phi: Formula) -> Formula:
    return phi.child if isinstance(phi, Not) else Not(phi)


def shift_thresholds(phi: Formula, eps: float, decimals: int | None = None) -> Formula:
    """Add ``eps`` to every atom threshold, whatever its comparison direction.

    ``decimals`` rounds the shifted thresholds (to strip float noise such as
    30.960000000000001 before rendering).
    """
    if isinstance(phi, Top):
        return phi
    if isinstance(phi, Atom):
        c = phi.threshold + eps
        return Atom(phi.var, phi.op, c if decimals is None else round(c, decimals))
    if isinstance(phi, Not):
        return Not(shift_thresholds(phi.child, eps, decimals))
    if isinstance(phi, (And, Or)):
        return type(phi)(shift_thresholds(phi.left, eps, decimals), shift_thresholds(phi.right, eps, decimals))
    if isinstance(phi, (Eventually, Globally)):
        return type(phi)(phi.interval, shift_thresholds(phi.child, eps, decimals))
    return Until(phi.interval, shift_thresholds(phi.left, eps, decimals), shift_thresholds(phi.right, eps, decimals))


def _push_not(phi: Formula) -> Formula | None:
    """Negation of an already simplified ``phi`` pushed one level down, or None."""
    if isinstance(phi, Not):
        return phi.child
    if isinstance(phi, Atom):
        return Atom(phi.var, GE if phi.op == LE else LE, phi.threshold)
    if isinstance(phi, And):
        return Or(simplify(Not(phi.left)), simplify(Not(phi.right)))
    if isinstance(phi, Or):
        return And(simplify(Not(phi.left)), simplify(Not(phi.right)))
    if isinstance(phi, Globally):
        return Eventually(phi.interval, simplify(Not(phi.child)))
    if isinstance(phi, Eventually):
        return Globally(phi.interval, simplify(Not(phi.child)))
    return None


def simplify(phi: Formula) -> Formula:
    """Apply robustness-preserving rewrites; never increases ``node_count``.

    Negations are pushed inwards (double negation, De Morgan, F/G duality,
    atom flips) whenever that does not grow the formula, and ``true`` is
    absorbed by conjunctions and disjunctions.
    """
    if isinstance(phi, (Top, Atom)):
        return phi
    if isinstance(phi, Not):
        inner = simplify(phi.child)
        kept = Not(inner)
        pushed = _push_not(inner)
        if pushed is not None and node_count(pushed) <= node_count(kept):
            return pushed
        return kept
    if isinstance(phi, (And, Or)):
        left, right = simplify(phi.left), simplify(phi.right)
        if isinstance(phi, And):
            if isinstance(left, Top):
                return right
            if isinstance(right, Top):
                return left
        else:
            if isinstance(left, Top) or isinstance(right, Top):
                return Top()
        if left == right:
            return left
        return type(phi)(left, right)
    if isinstance(phi, (Eventually, Globally)):
        return type(phi)(phi.interval, simplify(phi.child))
    return Until(phi.interval, simplify(phi.left), simplify(phi.right))
