"""Equilibrium terminal law of the mean field game without common noise.

The best-response map Phi sends a population law mu to the terminal law of a
representative player who optimizes against mu.  Fixed points are found by
damped Picard iteration; with a fixed seed every evaluation of Phi reuses the
same Brownian paths, so Phi is a deterministic map of measures and iterate
steps in W1 can be driven below the Monte Carlo noise floor.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import rng
from .measure import EmpiricalMeasure
from .model import ModelParams, RewardSpec, monotonicity_pairing
from .sde import TimeGrid, make_time_grid, simulate_optimal_terminal
from .value import QuadratureConfig

FIXED_SEED = "fixed"
FRESH_SEED = "fresh"
MOMENT_SLACK = 0.05
PAIRING_TOL = 1e-10


@dataclass(frozen=True)
class FixedPointConfig:
    M: int = 200_000
    max_iters: int = 50
    tol_w1: float = 5e-3
    damping: float = 1.0
    seed_policy: str = FIXED_SEED
    base_steps: int = 500
    cluster: float = 4.0
    auto_damping: bool = True
    fallback_damping: float = 0.5
    stall_window: int = 3
    bootstrap_reps: int = 16
    threads: int = 1

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.M < 1000:
            out.append("M must be >= 1000")
        if self.max_iters < 1:
            out.append("max_iters must be >= 1")
        if not self.tol_w1 > 0:
            out.append("tol_w1 must be > 0")
        if not 0 < self.damping <= 1:
            out.append("damping must lie in (0, 1]")
        if not 0 < self.fallback_damping <= 1:
            out.append("fallback_damping must lie in (0, 1]")
        if self.seed_policy not in (FIXED_SEED, FRESH_SEED):
            out.append(f"seed_policy must be {FIXED_SEED!r} or {FRESH_SEED!r}")
        if self.base_steps < 2:
            out.append("base_steps must be >= 2")
        if self.cluster < 1:
            out.append("cluster must be >= 1")
        if self.stall_window < 1:
            out.append("stall_window must be >= 1")
        if self.bootstrap_reps < 2:
            out.append("bootstrap_reps must be >= 2")
        if self.threads < 1:
            out.append("threads must be >= 1")
        return out

    def grid(self, T: float) -> TimeGrid:
        return make_time_grid(T, self.base_steps, self.cluster)


class IterateRecord(NamedTuple):
    iteration: int
    w1_step: float
    second_moment: float
    damping: float


@dataclass
class EquilibriumResult:
    mu_star: EmpiricalMeasure
    history: list[IterateRecord]
    converged: bool
    residual: float
    mc_error: float
    C0: float
    seed: int
    config: FixedPointConfig
    moment_violations: int = 0
    elapsed: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.history)

    @property
    def residual_ok(self) -> bool:
        return self.residual <= self.config.tol_w1 + 3.0 * self.mc_error

    def history_rows(self) -> list[tuple]:
        return [tuple(r) for r in self.history]

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "residual": self.residual,
            "mc_error": self.mc_error,
            "residual_ok": self.residual_ok,
            "C0": self.C0,
            "moment_violations": self.moment_violations,
            "seed": self.seed,
            "config": {k: v for k, v in asdict(self.config).items() if k != "threads"},
            "elapsed_s": self.elapsed,
            **self.extra,
        }

    def save(self, out_dir, stem: str = "equilibrium") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = [self.mu_star.save(out / f"{stem}_measure.csv")]
        hist = out / f"{stem}_history.csv"
        with hist.open("w") as fh:
            fh.write("iteration,w1_step,second_moment,damping\n")
            for r in self.history:
                fh.write(f"{r.iteration},{r.w1_step:.17g},{r.second_moment:.17g},{r.damping:.17g}\n")
        files.append(hist)
        summ = self.summary()
        summ.pop("elapsed_s")
        man = out / f"{stem}_summary.json"
        man.write_text(json.dumps(summ, indent=2, sort_keys=True) + "\n")
        files.append(man)
        return files


def c0_bound(params: ModelParams, reward: RewardSpec) -> float:
    """E[(A + sigma |B_T|)^2] with A = 2 sigma K^2 sqrt(2T/pi), the cap on |X_T|^2 in mean."""
    K = math.exp(reward.sup_norm / params.kappa)
    T = params.horizon_T
    A = 2.0 * params.sigma * K**2 * math.sqrt(2.0 * T / math.pi)
    return A * A + 2.0 * A * params.sigma * math.sqrt(2.0 * T / math.pi) + params.sigma**2 * T


def _require_no_common_noise(params: ModelParams):
    if params.sigma0 != 0:
        raise ValueError("the fixed-point solver handles sigma0 = 0; lift the result for common noise")


def phi_map(mu: EmpiricalMeasure, params: ModelParams, reward: RewardSpec, config: FixedPointConfig,
            seed: int, *, label: str = "phi", grid: TimeGrid | None = None,
            quad: QuadratureConfig | None = None) -> EmpiricalMeasure:
    """Empirical terminal law of M optimally controlled players facing ``mu``."""
    _require_no_common_noise(params)
    grid = grid or config.grid(params.horizon_T)
    batch = simulate_optimal_terminal(mu, params, reward, grid, config.M, seed, label=label,
                                      threads=config.threads, quad=quad)
    return batch.measure()


def compress(mu: EmpiricalMeasure, size: int) -> EmpiricalMeasure:
    """Equal-weight quantization at the mid-quantiles (k - 1/2)/size.

    Damped iterates are mixtures whose atom count would double every step; the
    quantization moves mass by at most one quantile cell.
    """
    if len(mu) <= size:
        return mu
    p = (np.arange(size) + 0.5) / size
    return EmpiricalMeasure.from_samples(mu.quantile(p))


def bootstrap_w1(mu: EmpiricalMeasure, size: int, reps: int, seed: int, label: str = "bootstrap") -> float:
    """Mean W1 between two independent size-``size`` resamples of ``mu``.

    This is the scale of the distance between two independent empirical laws
    of the same distribution, which is what a residual W1(Phi(mu), mu)
    measures at a fixed point.
    """
    gen = rng.generator(seed, label)
    d = [mu.resample(size, gen).w1(mu.resample(size, gen)) for _ in range(reps)]
    return float(np.mean(d))


def initial_measure(kind: str, M: int, seed: int, scale: float = 2.0) -> EmpiricalMeasure:
    """Starting law: ``dirac`` (delta_0) or ``normal`` (M atoms from N(0, scale^2))."""
    if kind == "dirac":
        return EmpiricalMeasure.dirac(0.0)
    if kind == "normal":
        gen = rng.generator(seed, f"init/normal/{scale:g}")
        return EmpiricalMeasure.from_samples(scale * gen.standard_normal(M))
    raise ValueError(f"unknown initial measure {kind!r}")


def solve_equilibrium(params: ModelParams, reward: RewardSpec, config: FixedPointConfig | None = None,
                      seed: int = 0, mu0: EmpiricalMeasure | None = None, *,
                      quad: QuadratureConfig | None = None, log=None) -> EquilibriumResult:
    """Damped Picard iteration mu <- (1 - lam) mu + lam Phi(mu) until the W1 step is below tol_w1."""
    _require_no_common_noise(params)
    config = config or FixedPointConfig()
    t0 = time.perf_counter()
    grid = config.grid(params.horizon_T)
    C0 = c0_bound(params, reward)
    mu = mu0 if mu0 is not None else EmpiricalMeasure.dirac(0.0)
    lam = config.damping
    history: list[IterateRecord] = []
    converged = False
    stall = 0
    prev = math.inf
    violations = 0
    for k in range(1, config.max_iters + 1):
        label = "phi" if config.seed_policy == FIXED_SEED else f"phi/{k}"
        phi = phi_map(mu, params, reward, config, seed, label=label, grid=grid, quad=quad)
        new = compress(mu.mixture(phi, lam), config.M)
        step = new.w1(mu)
        m2 = new.second_moment()
        if m2 > C0 * (1.0 + MOMENT_SLACK):
            violations += 1
        history.append(IterateRecord(k, step, m2, lam))
        if log:
            log(f"iteration {k}: W1 step {step:.3e}, second moment {m2:.4f}, damping {lam:g}")
        mu = new
        if step <= config.tol_w1:
            converged = True
            break
        stall = stall + 1 if step >= prev else 0
        prev = step
        if config.auto_damping and stall >= config.stall_window and lam > config.fallback_damping:
            lam = config.fallback_damping
            stall = 0
    fresh = phi_map(mu, params, reward, config, seed, label="residual", grid=grid, quad=quad)
    residual = fresh.w1(mu)
    mc_error = bootstrap_w1(mu, config.M, config.bootstrap_reps, seed)
    return EquilibriumResult(mu, history, converged, residual, mc_error, C0, seed, config, violations,
                             time.perf_counter() - t0, {"grid": grid.spec()})


class UniquenessReport(NamedTuple):
    pairing: float
    non_positive: bool
    convention: str
    w1: float


def uniqueness_certificate(reward: RewardSpec, mu_a: EmpiricalMeasure, mu_b: EmpiricalMeasure,
                           regular: bool = False) -> UniquenessReport:
    """Monotonicity pairing of two candidate equilibria, its sign, and their W1 distance."""
    p = monotonicity_pairing(reward, mu_a, mu_b, regular=regular)
    return UniquenessReport(p, p <= PAIRING_TOL, "regular" if regular else "right-continuous", mu_a.w1(mu_b))
