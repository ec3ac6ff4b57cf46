"""Synthetic replicas of the train cruise control and maritime surveillance benchmarks.

These reproduce the structure of the two scenarios (balanced classes, a
clear-cut temporal separator, a handful of borderline outliers; two
anomaly modes on a 2-d route), not their data.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trajectory import LabeledSet, Trajectory, rng_for


@dataclass(frozen=True)
class CruiseConfig:
    n_traj: int = 200
    length: int = 48
    base_band: tuple = (33.5, 37.0)     # cruise level
    amplitude: tuple = (1.0, 2.5)       # speed oscillation
    period: tuple = (10.0, 20.0)
    noise: float = 0.2
    dip_depth: tuple = (12.0, 16.0)     # anomalous slow-down
    dip_onset: tuple = (10, 22)
    dip_duration: tuple = (10, 18)
    n_outliers: int = 7

    def validate(self):
        if self.n_traj < 2 or self.n_traj % 2:
            raise ValueError("n_traj must be a positive even number (balanced classes)")
        if self.length < 8:
            raise ValueError("length must be at least 8")
        if not 0 <= self.n_outliers <= self.n_traj:
            raise ValueError("n_outliers out of range")
        if self.dip_onset[1] + self.dip_duration[1] >= self.length:
            raise ValueError("dip window does not fit in the trajectory")
        for lo, hi in (self.base_band, self.amplitude, self.period, self.dip_depth):
            if lo > hi:
                raise ValueError("range bounds must satisfy lo <= hi")

    @property
    def band_min(self) -> float:
        """Lowest value a regular trajectory can reach (up to 3-sigma noise)."""
        return self.base_band[0] - self.amplitude[1] - 3 * self.noise

    def dip_window(self) -> tuple[int, int]:
        return self.dip_onset[0], self.dip_onset[1] + self.dip_duration[1]


def _cruise_one(cfg: CruiseConfig, rng: np.random.Generator, dip_depth: float | None,
                dip_duration: tuple | None = None) -> np.ndarray:
    t = np.arange(cfg.length, dtype=float)
    level = rng.uniform(*cfg.base_band)
    amp = rng.uniform(*cfg.amplitude)
    period = rng.uniform(*cfg.period)
    phase = rng.uniform(0, 2 * np.pi)
    x = level + amp * np.sin(2 * np.pi * t / period + phase) + rng.normal(0, cfg.noise, cfg.length)
    if dip_depth is not None:
        lo_d, hi_d = dip_duration or cfg.dip_duration
        onset = int(rng.integers(cfg.dip_onset[0], cfg.dip_onset[1] + 1))
        dur = int(rng.integers(lo_d, hi_d + 1))
        u = (t - onset) / dur
        inside = (u >= 0) & (u <= 1)
        x = x - np.where(inside, dip_depth * np.sin(np.pi * np.clip(u, 0, 1)) ** 2, 0.0)
    return x


def gen_cruise(config: CruiseConfig = CruiseConfig(), seed: int = 0) -> LabeledSet:
    """Train cruise control replica.

    Regular runs oscillate around a cruise level; anomalous runs slow down
    sharply for a sub-interval. Outliers (tagged ``"outlier"``) are anomalies
    with a dip too shallow to leave the band and regular runs with a short
    deep drop, split as evenly as possible between the classes.
    """
    config.validate()
    rng = rng_for(seed, "cruise")
    half = config.n_traj // 2
    labels = np.array([0] * half + [1] * half)
    order = rng.permutation(config.n_traj)
    labels = labels[order]
    n_out_anom = (config.n_outliers + 1) // 2
    n_out_reg = config.n_outliers - n_out_anom
    anom_idx = np.flatnonzero(labels == 1)
    reg_idx = np.flatnonzero(labels == 0)
    outliers = set(rng.choice(anom_idx, n_out_anom, replace=False).tolist()) | \
        set(rng.choice(reg_idx, n_out_reg, replace=False).tolist())
    trajs, tags = [], []
    for i, y in enumerate(labels):
        r = rng_for(seed, "cruise", i)
        if i in outliers:
            if y == 1:
                x = _cruise_one(config, r, r.uniform(0.5, 1.5))
            else:
                x = _cruise_one(config, r, r.uniform(*config.dip_depth), dip_duration=(2, 4))
            tags.append("outlier")
        else:
            x = _cruise_one(config, r, r.uniform(*config.dip_depth) if y == 1 else None)
            tags.append("anomalous" if y == 1 else "regular")
        trajs.append(Trajectory(x[:, None]))
    return LabeledSet(trajs, labels.tolist(), [str(i) for i in range(config.n_traj)], tags)


@dataclass(frozen=True)
class MaritimeConfig:
    n_traj: int = 2000
    length: int = 61
    # (time index, x_0, x_1) knots of the expected route
    route: tuple = ((0, 40.0, 10.0), (20, 26.0, 22.0), (35, 17.0, 30.0), (60, 12.0, 35.0))
    # anomaly mode "a" never turns north; mode "b" turns back east
    route_a: tuple = ((0, 40.0, 10.0), (20, 26.0, 22.0), (35, 17.0, 22.5), (60, 12.0, 23.0))
    route_b: tuple = ((0, 40.0, 10.0), (20, 26.0, 22.0), (35, 23.0, 30.5), (60, 29.0, 35.0))
    offset_sd: float = 0.8
    jitter_sd: float = 0.25

    def validate(self):
        if self.n_traj < 2 or self.n_traj % 2:
            raise ValueError("n_traj must be a positive even number (balanced classes)")
        for r in (self.route, self.route_a, self.route_b):
            if r[0][0] != 0 or r[-1][0] != self.length - 1:
                raise ValueError("route knots must span the whole trajectory")


def _follow(route, length: int, rng: np.random.Generator, cfg: MaritimeConfig) -> np.ndarray:
    knots = np.asarray(route, dtype=float)
    t = np.arange(length, dtype=float)
    path = np.stack([np.interp(t, knots[:, 0], knots[:, 1]), np.interp(t, knots[:, 0], knots[:, 2])], axis=1)
    drift = rng.normal(0, cfg.offset_sd, 2)
    return path + drift + rng.normal(0, cfg.jitter_sd, path.shape)


def gen_maritime(config: MaritimeConfig = MaritimeConfig(), seed: int = 0) -> LabeledSet:
    """Maritime surveillance replica: vessel (x_0, x_1) positions over a harbour.

    Tags are ``"regular"``, ``"mode_a"`` (never reaches the northern lane)
    and ``"mode_b"`` (heads back east instead of docking west).
    """
    config.validate()
    rng = rng_for(seed, "maritime")
    half = config.n_traj // 2
    kinds = np.array(["regular"] * half + ["mode_a"] * (half - half // 2) + ["mode_b"] * (half // 2))
    kinds = kinds[rng.permutation(config.n_traj)]
    routes = {"regular": config.route, "mode_a": config.route_a, "mode_b": config.route_b}
    trajs = [Trajectory(_follow(routes[k], config.length, rng_for(seed, "maritime", i), config))
             for i, k in enumerate(kinds)]
    labels = [0 if k == "regular" else 1 for k in kinds]
    return LabeledSet(trajs, labels, [str(i) for i in range(config.n_traj)], kinds.tolist())
