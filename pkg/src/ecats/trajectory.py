"""Trajectories, the mu0 piecewise-linear sampler, and CSV ingestion."""
from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Trajectory", "Mu0Params", "LabeledSet", "SchemaError",
    "rng_for", "draw_mu0", "sample_mu0", "sample_mu0_batch", "load_csv", "save_csv",
]


def rng_for(seed, *names) -> np.random.Generator:
    """Independent generator for a named sub-stream of ``seed``.

    Names may be strings or integers, e.g. ``rng_for(7, "bank", 3)``.
    """
    key = [int(seed)]
    for name in names:
        key.append(zlib.crc32(name.encode()) if isinstance(name, str) else int(name))
    return np.random.default_rng(key)


def sub_seed(seed, *names) -> int:
    """Integer seed of a named sub-stream, for APIs that take an int."""
    return int(rng_for(seed, *names).integers(2**31 - 1))


@dataclass(frozen=True)
class Trajectory:
    values: np.ndarray  # (T, n)
    dt: float = 1.0
    t0: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 2:
            raise ValueError(f"trajectory needs shape (T>=2, n), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("trajectory values must be finite")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_dims(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.length)


@dataclass(frozen=True)
class Mu0Params:
    a: float = 0.0
    b: float = 100.0
    delta: float = 1.0
    m_start: float = 0.0
    sigma_start: float = 1.0
    m_tv: float = 0.0
    sigma_tv: float = 1.0
    q: float = 0.1
    n_dims: int = 1

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError("mu0 interval needs b > a")
        if not self.delta > 0:
            raise ValueError("mu0 step delta must be positive")
        if not (self.sigma_start > 0 and self.sigma_tv > 0):
            raise ValueError("mu0 standard deviations must be positive")
        if not 0 <= self.q <= 1:
            raise ValueError("mu0 flip probability q must lie in [0, 1]")
        if self.n_dims < 1:
            raise ValueError("mu0 needs at least one dimension")

    @property
    def n_steps(self) -> int:
        return int(math.floor((self.b - self.a) / self.delta + 1e-9))


def draw_mu0(params: Mu0Params, rng: np.random.Generator):
    """One mu0 path per dimension.

    Returns ``(values, total_variation, signs)`` with shapes (N+1, n), (n,)
    and (N, n); ``signs[i]`` is the slope sign of segment i.
    """
    N = params.n_steps
    n = params.n_dims
    values = np.empty((N + 1, n))
    tv = np.empty(n)
    signs = np.empty((N, n))
    for d in range(n):
        start = rng.normal(params.m_start, params.sigma_start)
        K = rng.normal(params.m_tv, params.sigma_tv) ** 2
        y = np.empty(N + 1)
        y[0] = 0.0
        y[N] = K
        y[1:N] = np.sort(rng.uniform(0.0, K, size=N - 1))
        s0 = 1.0 if rng.random() < 0.5 else -1.0
        flips = np.where(rng.random(N) < params.q, -1.0, 1.0)
        s = s0 * np.cumprod(flips)
        values[0, d] = start
        values[1:, d] = start + np.cumsum(s * np.diff(y))
        tv[d] = K
        signs[:, d] = s
    return values, tv, signs


def sample_mu0(params: Mu0Params, seed) -> Trajectory:
    """Sample a trajectory on [a, b] with step delta; deterministic in ``seed``.

    ``seed`` is anything ``numpy.random.default_rng`` accepts (an int, a
    sequence of ints or a SeedSequence).
    """
    values, _, _ = draw_mu0(params, np.random.default_rng(seed))
    return Trajectory(values, dt=params.delta, t0=params.a)


def sample_mu0_batch(params: Mu0Params, seed: int, count: int) -> np.ndarray:
    """(count, N+1, n) array; trajectory i uses the derived stream (seed, i)."""
    out = np.empty((count, params.n_steps + 1, params.n_dims))
    for i in range(count):
        out[i] = draw_mu0(params, np.random.default_rng([int(seed), i]))[0]
    return out


@dataclass
class LabeledSet:
    trajectories: list[Trajectory]
    labels: list[int]
    ids: list[str] = field(default_factory=list)
    tags: list[str] | None = None  # generator-specific annotations, not persisted

    def __post_init__(self):
        if len(self.trajectories) != len(self.labels):
            raise ValueError("trajectories and labels differ in length")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.trajectories))]
        if len(self.ids) != len(self.trajectories):
            raise ValueError("ids and trajectories differ in length")
        if any(y not in (0, 1) for y in self.labels):
            raise ValueError("labels must be 0 (regular) or 1 (anomalous)")
        if self.trajectories:
            first = self.trajectories[0]
            for tr in self.trajectories[1:]:
                if tr.values.shape != first.values.shape or not math.isclose(tr.dt, first.dt, rel_tol=1e-9):
                    raise ValueError("all trajectories must share length, dimension and dt")

    def __len__(self):
        return len(self.trajectories)

    def array(self) -> np.ndarray:
        """Stacked values, shape (N, T, n)."""
        return np.stack([tr.values for tr in self.trajectories])

    @property
    def y(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=int)

    def subset(self, index) -> "LabeledSet":
        index = list(index)
        return LabeledSet(
            [self.trajectories[i] for i in index],
            [self.labels[i] for i in index],
            [self.ids[i] for i in index],
            None if self.tags is None else [self.tags[i] for i in index],
        )

    def by_class(self, label: int) -> list[Trajectory]:
        return [tr for tr, y in zip(self.trajectories, self.labels) if y == label]


class SchemaError(ValueError):
    def __init__(self, message: str, row: int | None = None):
        where = f"row {row}: " if row is not None else ""
        super().__init__(where + message)
        self.row = row


def save_csv(data: LabeledSet, path) -> None:
    if not len(data):
        raise SchemaError("no trajectories")
    n = data.trajectories[0].n_dims
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "time", "label"] + [f"x_{i}" for i in range(n)])
        for tid, tr, y in zip(data.ids, data.trajectories, data.labels):
            for t, row in zip(tr.times, tr.values):
                w.writerow([tid, repr(float(t)), y] + [repr(float(v)) for v in row])


def load_csv(path) -> LabeledSet:
    """Read the ``traj_id,time,label,x_0[,x_1,...]`` schema.

    Row numbers in errors are 1-based file lines (the header is line 1).
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError("empty file", 1)
        header = [h.strip() for h in header]
        if header[:3] != ["traj_id", "time", "label"]:
            raise SchemaError("header must start with traj_id,time,label", 1)
        vars_ = header[3:]
        if not vars_ or vars_ != [f"x_{i}" for i in range(len(vars_))]:
            raise SchemaError("missing or misnamed signal columns (expected x_0, x_1, ...)", 1)
        groups: dict[str, dict] = {}
        order: list[str] = []
        last = None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise SchemaError(f"expected {len(header)} columns, got {len(row)}", lineno)
            tid = row[0].strip()
            try:
                t = float(row[1])
                label = int(row[2])
                vals = [float(c) for c in row[3:]]
            except ValueError as exc:
                raise SchemaError(f"non-numeric cell ({exc})", lineno) from None
            if label not in (0, 1):
                raise SchemaError(f"label must be 0 or 1, got {label}", lineno)
            if not all(math.isfinite(v) for v in vals) or not math.isfinite(t):
                raise SchemaError("non-finite value", lineno)
            if tid != last and tid in groups:
                raise SchemaError(f"rows of trajectory {tid!r} are not contiguous", lineno)
            if tid not in groups:
                groups[tid] = {"times": [], "values": [], "label": label}
                order.append(tid)
            g = groups[tid]
            if label != g["label"]:
                raise SchemaError(f"label changes within trajectory {tid!r}", lineno)
            if g["times"] and t <= g["times"][-1]:
                raise SchemaError(f"time not strictly increasing in trajectory {tid!r}", lineno)
            g["times"].append(t)
            g["values"].append(vals)
            g.setdefault("first_row", lineno)
            last = tid
    if not order:
        raise SchemaError("no trajectories")
    trajectories = []
    length = None
    for tid in order:
        g = groups[tid]
        times = np.asarray(g["times"])
        if len(times) < 2:
            raise SchemaError(f"trajectory {tid!r} has fewer than 2 samples", g["first_row"])
        steps = np.diff(times)
        dt = float(steps[0])
        if not np.allclose(steps, dt, rtol=1e-9, atol=1e-12):
            raise SchemaError(f"trajectory {tid!r} is not uniformly sampled", g["first_row"])
        if length is not None and len(times) != length:
            raise SchemaError(f"ragged trajectory lengths ({tid!r} has {len(times)}, expected {length})",
                              g["first_row"])
        length = len(times)
        trajectories.append(Trajectory(np.asarray(g["values"]), dt=dt, t0=float(times[0])))
    return LabeledSet(trajectories, [groups[t]["label"] for t in order], list(order))
