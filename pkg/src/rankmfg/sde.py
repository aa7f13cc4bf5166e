"""Euler-Maruyama simulation of the controlled state dX = a dt + sigma dB, X_0 = 0."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import rng
from .measure import EmpiricalMeasure
from .model import ModelParams, RewardSpec
from .value import QuadratureConfig, ValueField

TAIL_FRACTION = 0.1
DEFAULT_CHUNK = 65536
MIN_CHUNK = 1024


@dataclass(frozen=True)
class TimeGrid:
    nodes: np.ndarray
    base_steps: int = 0
    cluster: float = 1.0

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.size < 2 or nodes[0] != 0.0 or np.any(np.diff(nodes) <= 0):
            raise ValueError("time grid must start at 0 and be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def n_steps(self) -> int:
        return self.nodes.size - 1

    def spec(self) -> dict:
        return {"T": self.T, "base_steps": self.base_steps, "cluster": self.cluster, "n_steps": self.n_steps}


def make_time_grid(T: float, base_steps: int, cluster: float = 1.0) -> TimeGrid:
    """Uniform grid with step T/base_steps, except that for ``cluster > 1`` the last
    ~10% of the horizon is replaced by ``cluster`` times as many nodes placed at
    t_j = T - L (1 - j/m)^2, which crowds them toward T where the drift bound
    grows like 1/sqrt(T - t)."""
    if base_steps < 2:
        raise ValueError("base_steps must be >= 2")
    if T <= 0:
        raise ValueError("T must be positive")
    if cluster < 1:
        raise ValueError("cluster must be >= 1")
    h = T / base_steps
    if cluster == 1:
        nodes = h * np.arange(base_steps + 1)
        nodes[-1] = T
        return TimeGrid(nodes, base_steps, cluster)
    n_tail = max(1, int(math.ceil(TAIL_FRACTION * base_steps)))
    n_body = base_steps - n_tail
    body = h * np.arange(n_body + 1)
    split = body[-1]
    m = max(1, int(round(cluster * n_tail)))
    j = np.arange(1, m + 1)
    tail = T - (T - split) * (1.0 - j / m) ** 2
    tail[-1] = T
    return TimeGrid(np.concatenate([body, tail]), base_steps, cluster)


# -- noise sources ------------------------------------------------------------------


class CounterNoise:
    """Standard normals addressed by (seed, label, step, path index)."""

    def __init__(self, seed: int, label: str):
        self.seed = seed
        self.label = label

    def __call__(self, step: int, positions: np.ndarray) -> np.ndarray:
        return rng.normals_at(self.seed, self.label, step, positions)


class NestedNoise:
    """Normals for a coarse grid built by summing the Brownian increments of a finer
    grid that contains every coarse node.  Runs on nested grids then share one
    Brownian path, which is what strong-error comparisons need."""

    def __init__(self, seed: int, label: str, fine: TimeGrid, coarse: TimeGrid):
        idx = np.searchsorted(fine.nodes, coarse.nodes)
        if np.any(idx >= fine.nodes.size) or not np.allclose(fine.nodes[idx], coarse.nodes, rtol=0, atol=1e-12):
            raise ValueError("coarse grid is not contained in the fine grid")
        self.base = CounterNoise(seed, label)
        self.fine_dt = fine.dt
        self.coarse_dt = coarse.dt
        self.bounds = idx

    def __call__(self, step: int, positions: np.ndarray) -> np.ndarray:
        j0, j1 = self.bounds[step], self.bounds[step + 1]
        acc = np.zeros(np.size(positions))
        for j in range(j0, j1):
            acc += math.sqrt(self.fine_dt[j]) * self.base(j, positions)
        return acc / math.sqrt(self.coarse_dt[step])


# -- strategies -----------------------------------------------------------------------


class OptimalFeedback:
    """a*(t, x) = v_x / (2c) against a fixed population law, tabulated once per grid node.

    ``scale`` and ``time_factor`` give the perturbed feedbacks kappa * a*(t, x)
    and a*(time_factor * t, x) used as deviations.
    """

    reads_common = False

    def __init__(self, field: ValueField, grid: TimeGrid, scale: float = 1.0, time_factor: float = 1.0,
                 tables: list | None = None, name: str | None = None):
        self.field = field
        self.grid = grid
        self.scale = scale
        self.time_factor = time_factor
        self.name = name or ("a*" if scale == 1 and time_factor == 1 else f"{scale:g}*a*(t*{time_factor:g})")
        self.bound = math.inf
        if tables is None:
            tables = [field.drift_table(time_factor * t) for t in grid.nodes[:-1]]
        self.tables = tables

    def with_scale(self, scale: float, name: str | None = None) -> "OptimalFeedback":
        return OptimalFeedback(self.field, self.grid, scale, self.time_factor, self.tables, name)

    def drift(self, step: int, t: float, x: np.ndarray, w=None) -> np.ndarray:
        a = self.tables[step](x)
        return a if self.scale == 1.0 else self.scale * a


@dataclass(frozen=True)
class ConstantControl:
    value: float
    name: str = ""
    reads_common = False

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("constant control must be finite")
        if not self.name:
            object.__setattr__(self, "name", f"const({self.value:g})")

    @property
    def bound(self) -> float:
        return abs(self.value)

    def drift(self, step, t, x, w=None):
        return np.full(np.shape(x), self.value)


@dataclass(frozen=True)
class ScheduleControl:
    """Deterministic time-dependent effort a(t) with |a| <= bound."""

    fn: Callable[[float], float]
    bound: float
    name: str = "schedule"
    reads_common = False

    def __post_init__(self):
        if not (math.isfinite(self.bound) and self.bound >= 0):
            raise ValueError("schedule control needs a finite bound")

    def drift(self, step, t, x, w=None):
        a = float(self.fn(t))
        if abs(a) > self.bound:
            raise ValueError(f"{self.name}: |a({t})| = {abs(a)} exceeds declared bound {self.bound}")
        return np.full(np.shape(x), a)


@dataclass(frozen=True)
class BoundedFeedback:
    """Markov feedback a(t, x) (or a(t, x, w) when ``reads_common``) with |a| <= bound."""

    fn: Callable
    bound: float
    name: str = "feedback"
    reads_common: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.bound) and self.bound >= 0):
            raise ValueError("feedback control needs a finite bound")

    def drift(self, step, t, x, w=None):
        a = np.asarray(self.fn(t, x, w) if self.reads_common else self.fn(t, x), dtype=float)
        a = np.broadcast_to(a, np.shape(x))
        if np.any(np.abs(a) > self.bound):
            raise ValueError(f"{self.name}: control exceeds declared bound {self.bound}")
        return a


StrategySpec = OptimalFeedback | ConstantControl | ScheduleControl | BoundedFeedback


# -- simulation -------------------------------------------------------------------------


@dataclass
class SimBatch:
    terminal_values: np.ndarray
    effort_costs: np.ndarray
    drift_integrals: np.ndarray
    seed: int
    label: str
    path_ids: np.ndarray
    grid_spec: dict = field(default_factory=dict)

    @property
    def paths(self) -> int:
        return self.terminal_values.size

    def measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure.from_samples(self.terminal_values)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            fh.write("path_index,terminal_value,effort_cost\n")
            for i, x, e in zip(self.path_ids, self.terminal_values, self.effort_costs):
                fh.write(f"{i},{x:.17g},{e:.17g}\n")
        return path

    def manifest(self, params: ModelParams) -> dict:
        return {
            "seed": self.seed,
            "label": self.label,
            "paths": self.paths,
            "grid": self.grid_spec,
            "params": {"sigma": params.sigma, "sigma0": params.sigma0,
                       "cost_c": params.cost_c, "horizon_T": params.horizon_T},
        }


def simulate(strategy, params: ModelParams, grid: TimeGrid, path_ids, seed: int, label: str = "idio",
             *, threads: int = 1, noise=None, common=None, chunk: int | None = None) -> SimBatch:
    """Advance every path in ``path_ids`` over ``grid`` under ``strategy``.

    Path i always sees the normals at position i of the (seed, label) stream, so
    the output does not depend on ``threads`` or ``chunk`` (by default the paths
    are split so every thread gets work, in blocks of at most DEFAULT_CHUNK).  ``common`` (optional)
    maps a step index and path ids to the common-noise displacement sigma0 W_t,
    handed to strategies that read it.
    """
    path_ids = np.asarray(path_ids, dtype=np.int64)
    if path_ids.ndim == 0:
        path_ids = np.arange(int(path_ids))
    noise = noise or CounterNoise(seed, label)
    M = path_ids.size
    X = np.zeros(M)
    effort = np.zeros(M)
    drift_int = np.zeros(M)
    nodes = grid.nodes
    dt = grid.dt
    sig = params.sigma
    c = params.cost_c

    def run(sl: slice):
        ids = path_ids[sl]
        x = np.zeros(ids.size)
        eff = np.zeros(ids.size)
        dint = np.zeros(ids.size)
        for k in range(grid.n_steps):
            t = nodes[k]
            w = common(k, ids) if (common is not None and strategy.reads_common) else None
            a = strategy.drift(k, t, x, w)
            z = noise(k, ids)
            x = x + a * dt[k] + sig * math.sqrt(dt[k]) * z
            eff += c * a * a * dt[k]
            dint += np.abs(a) * dt[k]
        X[sl], effort[sl], drift_int[sl] = x, eff, dint

    if chunk is None:
        chunk = max(MIN_CHUNK, min(DEFAULT_CHUNK, -(-M // max(threads, 1))))
    slices = [slice(lo, min(lo + chunk, M)) for lo in range(0, M, chunk)]
    if threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, slices))
    else:
        for sl in slices:
            run(sl)
    return SimBatch(X, effort, drift_int, seed, label, path_ids, grid.spec())


def simulate_optimal_terminal(mu: EmpiricalMeasure, params: ModelParams, reward: RewardSpec, grid: TimeGrid,
                              M: int, seed: int, *, label: str = "idio", threads: int = 1,
                              quad: QuadratureConfig | None = None, noise=None) -> SimBatch:
    if M < 1:
        raise ValueError("M must be >= 1")
    strategy = OptimalFeedback(ValueField(params, reward, mu, quad), grid)
    return simulate(strategy, params, grid, np.arange(M), seed, label, threads=threads, noise=noise)


def simulate_strategy(control, params: ModelParams, grid: TimeGrid, M: int, seed: int, *,
                      label: str = "idio", threads: int = 1, noise=None) -> SimBatch:
    if M < 1:
        raise ValueError("M must be >= 1")
    if not isinstance(control, OptimalFeedback) and not math.isfinite(getattr(control, "bound", math.inf)):
        raise ValueError("unbounded control specification")
    return simulate(control, params, grid, np.arange(M), seed, label, threads=threads, noise=noise)
