"""Common-noise game obtained by translating the equilibrium without common noise.

For a purely rank-based reward, ranks do not change when every state moves
by the same amount.  An equilibrium law mu_bar of the game without common
noise therefore lifts to mu = mu_bar(. - sigma0 W_T).  Players keep the
open-loop control a*(t, X_t - sigma0 W_t; mu_bar), i.e. they steer the
idiosyncratic coordinate X° = X - sigma0 W.  The simulator works in that
coordinate and adds sigma0 W only where ranks are taken.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import UnsupportedMethodError
from .fixed_point import bootstrap_w1
from .measure import EmpiricalMeasure
from .model import ModelParams, RewardSpec
from .nash import DEFAULT_LADDER, NashReport, common_paths, default_family, verify_nash, _feedback
from .sde import OptimalFeedback, TimeGrid, simulate


def _require_rank_only(reward: RewardSpec | None):
    if reward is not None and not reward.rank_only:
        raise UnsupportedMethodError("the common-noise lift needs a purely rank-based reward")


def lift_equilibrium(mu_bar: EmpiricalMeasure, sigma0: float, wT: float,
                     reward: RewardSpec | None = None) -> EmpiricalMeasure:
    """mu_bar(. - sigma0 wT): every atom moves by +sigma0 wT."""
    _require_rank_only(reward)
    if sigma0 < 0:
        raise ValueError("sigma0 must be >= 0")
    return mu_bar.shift(-sigma0 * wT)


@dataclass
class CommonNoiseRun:
    base_equilibrium: EmpiricalMeasure
    sigma0: float
    w_samples: np.ndarray  # sigma0 * W_T for each common path
    conditional_w1: np.ndarray
    baseline_w1: np.ndarray  # the same statistic with sigma0 = 0, against mu_bar itself
    sampling_w1: float  # mean W1 between two independent size-M resamples of mu_bar
    sampling_stderr: float
    M: int
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def max_w1(self) -> float:
        return float(np.max(self.conditional_w1))

    @property
    def mean_w1(self) -> float:
        return float(np.mean(self.conditional_w1))

    @property
    def baseline_stderr(self) -> float:
        n = self.baseline_w1.size
        return float(np.std(self.baseline_w1, ddof=1) / math.sqrt(n)) if n > 1 else math.inf

    @property
    def baseline_consistent(self) -> bool:
        return abs(self.mean_w1 - float(np.mean(self.baseline_w1))) <= 3.0 * self.baseline_stderr

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            fh.write("w_index,sigma0_wT,conditional_w1,baseline_w1\n")
            for j, (w, d, b) in enumerate(zip(self.w_samples, self.conditional_w1, self.baseline_w1)):
                fh.write(f"{j},{w:.17g},{d:.17g},{b:.17g}\n")
        return path

    def summary(self) -> dict:
        return {
            "sigma0": self.sigma0,
            "M": self.M,
            "w_count": int(self.w_samples.size),
            "max_conditional_w1": self.max_w1,
            "mean_conditional_w1": self.mean_w1,
            "mean_baseline_w1": float(np.mean(self.baseline_w1)),
            "baseline_stderr": self.baseline_stderr,
            "baseline_consistent": self.baseline_consistent,
            "sampling_w1": self.sampling_w1,
            "sampling_stderr": self.sampling_stderr,
            "seed": self.seed,
            **self.extra,
        }


def conditional_fixed_point_check(mu_bar: EmpiricalMeasure, params: ModelParams, reward: RewardSpec, M: int,
                                  w_count: int, seed: int, *, grid: TimeGrid | None = None,
                                  bootstrap_reps: int = 16, threads: int = 1,
                                  label: str = "conditional") -> CommonNoiseRun:
    """For each of ``w_count`` common paths, W1 between the conditional terminal law
    of M players and the lifted measure mu_bar(. - sigma0 W_T).

    Two reference scales come with it: the same statistic with sigma0 = 0
    (idiosyncratic law against mu_bar, path by path), and the mean W1 between
    two independent size-M resamples of mu_bar, i.e. the distance expected
    from sampling alone.
    """
    _require_rank_only(reward)
    if params.sigma0 <= 0:
        raise ValueError("conditional check needs sigma0 > 0")
    feedback = _feedback(mu_bar, params, reward, grid)
    grid = feedback.grid
    shift = common_paths(seed, f"{label}/common", grid, w_count, params.sigma0)
    dists = np.empty(w_count)
    baseline = np.empty(w_count)
    for j in range(w_count):
        ids = j * M + np.arange(M)
        batch = simulate(feedback, params, grid, ids, seed, f"{label}/idio", threads=threads)
        wT = float(shift.terminal[j])
        cond = EmpiricalMeasure.from_samples(batch.terminal_values + wT)
        dists[j] = cond.w1(lift_equilibrium(mu_bar, 1.0, wT))
        baseline[j] = EmpiricalMeasure.from_samples(batch.terminal_values).w1(mu_bar)
    samp = [bootstrap_w1(mu_bar, M, 2, seed, f"{label}/baseline/{b}") for b in range(bootstrap_reps)]
    return CommonNoiseRun(mu_bar, params.sigma0, shift.terminal.copy(), dists, baseline, float(np.mean(samp)),
                          float(np.std(samp, ddof=1) / math.sqrt(len(samp))), M, seed, {"grid": grid.spec()})


class CommonTilt:
    """Deviation that reads the common noise: a_bar(t, x°) * (1 + tilt * tanh(w))."""

    reads_common = True
    bound = math.inf

    def __init__(self, feedback: OptimalFeedback, tilt: float):
        self.feedback = feedback
        self.tilt = tilt
        self.name = f"a_bar*(1{tilt:+g}tanh(w))"

    def drift(self, step, t, x, w=None):
        a = self.feedback.drift(step, t, x)
        return a * (1.0 + self.tilt * np.tanh(w))


def common_noise_family(feedback: OptimalFeedback) -> dict:
    fam = default_family(feedback)
    for tilt in (0.25, -0.25):
        dev = CommonTilt(feedback, tilt)
        fam[dev.name] = dev
    return fam


def nplayer_common_noise_gap(mu_bar: EmpiricalMeasure, params: ModelParams, reward: RewardSpec, seed: int, *,
                             N_values=DEFAULT_LADDER, family: dict | None = None, reps=None,
                             grid: TimeGrid | None = None, label: str = "nplayer", threads: int = 1,
                             **kwargs) -> NashReport:
    """The N-player check with a shared Brownian motion W per replication.

    Players steer X° with the feedback computed against mu_bar; ranks are taken
    on X° + sigma0 W_T.  With the same seed the payoff table matches the
    sigma0 = 0 run because a common translation leaves every rank unchanged.
    """
    _require_rank_only(reward)
    feedback = _feedback(mu_bar, params, reward, grid)
    if family is None and kwargs.get("deviations", True):
        family = common_noise_family(feedback)
    base = ModelParams(params.sigma, 0.0, params.cost_c, params.horizon_T)
    return verify_nash(mu_bar, base, reward, seed, N_values=N_values, reps=reps, grid=feedback.grid,
                       family=family, label=label, shift_sigma0=params.sigma0, threads=threads, **kwargs)


class ExactnessCheck(NamedTuple):
    identical: bool
    table_common: list
    table_plain: list


def translation_exactness(mu_bar: EmpiricalMeasure, params: ModelParams, reward: RewardSpec, seed: int, *,
                          N_values=(64, 256, 1024), reps=None, grid: TimeGrid | None = None,
                          threads: int = 1, **kwargs) -> ExactnessCheck:
    """Payoff tables (N, J_N, stderr) with sigma0 as given and with sigma0 = 0, same seeds."""
    kwargs.setdefault("deviations", False)
    a = nplayer_common_noise_gap(mu_bar, params, reward, seed, N_values=N_values, reps=reps, grid=grid,
                                 threads=threads, **kwargs).payoff_table()
    plain = ModelParams(params.sigma, 0.0, params.cost_c, params.horizon_T)
    b = verify_nash(mu_bar, plain, reward, seed, N_values=N_values, reps=reps, grid=grid, threads=threads,
                    **kwargs).payoff_table()
    return ExactnessCheck(a == b, a, b)
