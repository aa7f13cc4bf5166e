"""N-player Monte Carlo check of the approximate Nash property of the mean field feedback.

Every player i in replication r uses the decentralized feedback
a_bar(t, X_i) = v_x(t, X_i; mu*) / (2c), and is ranked at T against the
empirical law of all N terminal states (self included, <= convention).
Player (r, i) is driven by the normals at position r * N + i of a per-N
stream, so a deviating player reuses exactly the Brownian path it had on the
equilibrium profile (common random numbers).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from scipy import stats
from scipy.special import gamma

from . import rng
from .errors import ConsistencyError, InsufficientDataError
from .measure import EmpiricalMeasure
from .model import ModelParams, RewardSpec
from .sde import ConstantControl, OptimalFeedback, TimeGrid, make_time_grid, simulate
from .value import ValueField

DEFAULT_LADDER = (16, 32, 64, 128, 256, 512, 1024)
TABLE_HEADER = ("N", "J_N", "stderr", "gap", "gap_stderr", "theory_bound",
                "abs_diff", "abs_diff_stderr", "rank_error", "rank_error_stderr", "reps", "argmax")


# -- closed-form helpers -------------------------------------------------------------


def dkw_bound(N: int, eps: float) -> float:
    """min(1, 2 exp(-2 N eps^2)): tail bound on sup |F_hat_N - F|."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if N < 1:
        raise ValueError("N must be >= 1")
    return min(1.0, 2.0 * math.exp(-2.0 * N * eps * eps))


def theory_bound(N: int, L: float, alpha: float) -> float:
    """2L (4N)^(-alpha/2) * int_0^inf exp(-y^(2/alpha) / 2) dy.

    With p = 2/alpha the integral is 2^(1/p) Gamma(1 + 1/p), so alpha = 1 gives
    L sqrt(pi/2) / sqrt(N).
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    p = 2.0 / alpha
    integral = 2.0 ** (1.0 / p) * gamma(1.0 + 1.0 / p)
    return 2.0 * L / (4.0 * N) ** (alpha / 2.0) * integral


class RateFit(NamedTuple):
    slope: float
    intercept: float
    used: int
    excluded: tuple


def rate_fit(gaps) -> RateFit:
    """Least-squares slope of log(gap) against log(N); non-positive gaps are dropped."""
    pts = [(float(n), float(g)) for n, g in gaps]
    keep = [(n, g) for n, g in pts if g > 0 and math.isfinite(g)]
    excluded = tuple(n for n, g in pts if not (g > 0 and math.isfinite(g)))
    if len({n for n, _ in keep}) < 3:
        raise InsufficientDataError(f"need >= 3 distinct N with positive gap, have {len(keep)}")
    x = np.log([n for n, _ in keep])
    y = np.log([g for _, g in keep])
    fit = stats.linregress(x, y)
    return RateFit(float(fit.slope), float(fit.intercept), len(keep), excluded)


class DKWCheck(NamedTuple):
    fraction: float
    bound: float
    lower_confidence: float
    ok: bool


def empirical_dkw(N: int = 100, eps: float = 0.1, draws: int = 10_000, seed: int = 0,
                  confidence: float = 0.99) -> DKWCheck:
    """Fraction of draws with sup |F_hat_N - F| > eps for uniform samples.

    The check fails only when the one-sided Clopper-Pearson lower confidence
    bound on the exceedance probability lies above the DKW bound.
    """
    gen = rng.generator(seed, f"dkw/{N}")
    U = np.sort(gen.random((draws, N)), axis=1)
    i = np.arange(1, N + 1)
    D = np.maximum(np.max(i / N - U, axis=1), np.max(U - (i - 1) / N, axis=1))
    k = int(np.sum(D > eps))
    lower = 0.0 if k == 0 else float(stats.beta.ppf(1.0 - confidence, k, draws - k + 1))
    bound = dkw_bound(N, eps)
    return DKWCheck(k / draws, bound, lower, lower <= bound)


# -- deviations ----------------------------------------------------------------------------


def default_family(feedback: OptimalFeedback) -> dict:
    """Finite probe set standing in for the sup over admissible deviations."""
    fam = {"a_bar": feedback}
    fam["zero"] = ConstantControl(0.0, "zero")
    for v in (0.5, -0.5, 1.0, -1.0):
        fam[f"const({v:+g})"] = ConstantControl(v)
    for k in (0.5, 0.8, 1.2, 1.5):
        fam[f"{k:g}*a_bar"] = feedback.with_scale(k, f"{k:g}*a_bar")
    fam["a_bar(0.8t)"] = OptimalFeedback(feedback.field, feedback.grid, time_factor=0.8, name="a_bar(0.8t)")
    return fam


# -- the game -------------------------------------------------------------------------------


class CommonShift(NamedTuple):
    """Common displacement sigma0 * W at every grid node, one column per replication."""
    path: np.ndarray  # (n_nodes, reps)

    @property
    def terminal(self) -> np.ndarray:
        return self.path[-1]

    def at(self, N: int) -> Callable:
        return lambda k, ids: self.path[k][ids // N]


def common_paths(seed: int, label: str, grid: TimeGrid, count: int, sigma0: float) -> CommonShift:
    """sigma0 * W at the grid nodes for ``count`` independent common paths."""
    inc = np.stack([math.sqrt(dt) * rng.normals(seed, label, k, 0, count) for k, dt in enumerate(grid.dt)])
    W = np.vstack([np.zeros(count), np.cumsum(inc, axis=0)])
    return CommonShift(sigma0 * W)


def _ranks(X: np.ndarray) -> np.ndarray:
    """F_hat(X_i) = #{j: X_j <= X_i} / N, per replication (row)."""
    out = np.empty_like(X)
    N = X.shape[1]
    for r in range(X.shape[0]):
        S = np.sort(X[r])
        out[r] = np.searchsorted(S, X[r], side="right") / N
    return out


def _deviant_ranks(X: np.ndarray, Xd: np.ndarray, who: np.ndarray) -> np.ndarray:
    """Rank of each deviating player ``who[r, m]`` at its new state ``Xd[r, m]`` among the others."""
    out = np.empty_like(Xd)
    N = X.shape[1]
    rows = np.arange(X.shape[0])[:, None]
    own = X[rows, who]
    for r in range(X.shape[0]):
        S = np.sort(X[r])
        out[r] = np.searchsorted(S, Xd[r], side="right")
    out -= (own <= Xd)
    return (out + 1.0) / N


class GameOutcome(NamedTuple):
    X: np.ndarray  # idiosyncratic terminal states (reps, N)
    Xf: np.ndarray  # full terminal states used for ranking
    effort: np.ndarray
    payoff: np.ndarray
    rank: np.ndarray


def play(feedback: OptimalFeedback, reward: RewardSpec, N: int, reps: int, seed: int, label: str,
         *, shift: CommonShift | None = None, threads: int = 1) -> GameOutcome:
    params = feedback.field.params
    grid = feedback.grid
    batch = simulate(feedback, params, grid, np.arange(reps * N), seed, f"{label}/N{N}", threads=threads)
    X = batch.terminal_values.reshape(reps, N)
    Xf = X + shift.terminal[:reps, None] if shift is not None else X
    rank = _ranks(Xf)
    effort = batch.effort_costs.reshape(reps, N)
    payoff = np.asarray(reward.surface(Xf, rank), dtype=float) - effort
    return GameOutcome(X, Xf, effort, payoff, rank)


def _mean_se(per_rep: np.ndarray) -> tuple[float, float]:
    n = per_rep.size
    m = float(np.mean(per_rep))
    se = float(np.std(per_rep, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return m, se


def nplayer_payoffs(mu_star: EmpiricalMeasure, params: ModelParams, reward: RewardSpec, N: int, reps: int,
                    seed: int, *, grid: TimeGrid | None = None, feedback: OptimalFeedback | None = None,
                    label: str = "nplayer", threads: int = 1) -> tuple[float, float]:
    """Mean per-player payoff J_N under the mean field feedback and its standard error over replications."""
    if N < 1:
        raise ValueError("N must be >= 1")
    feedback = feedback or _feedback(mu_star, params, reward, grid)
    out = play(feedback, reward, N, reps, seed, label, threads=threads)
    return _mean_se(out.payoff.mean(axis=1))


class DeviationResult(NamedTuple):
    gap: float
    stderr: float
    argmax: str
    by_strategy: dict


def deviation_gap(mu_star: EmpiricalMeasure, params: ModelParams, reward: RewardSpec, N: int,
                  family: dict | None, reps: int, seed: int, *, grid: TimeGrid | None = None,
                  feedback: OptimalFeedback | None = None, deviators: int = 4, label: str = "nplayer",
                  shift: CommonShift | None = None, outcome: GameOutcome | None = None,
                  threads: int = 1) -> DeviationResult:
    """Largest mean gain J^{N,beta} - J^N over ``family`` for a unilateral deviator.

    In each replication players 0 .. deviators-1 deviate one at a time (the
    others keep the equilibrium feedback and their realized paths); the
    deviator reuses its own equilibrium Brownian path.
    """
    feedback = feedback or _feedback(mu_star, params, reward, grid)
    grid = feedback.grid
    family = family if family is not None else default_family(feedback)
    if outcome is None:
        outcome = play(feedback, reward, N, reps, seed, label, shift=shift, threads=threads)
    d = min(deviators, N)
    who = np.broadcast_to(np.arange(d), (reps, d))
    ids = (np.arange(reps)[:, None] * N + who).ravel()
    base = outcome.payoff[:, :d]
    results = {}
    for name, beta in family.items():
        common = shift.at(N) if shift is not None else None
        batch = simulate(beta, params, grid, ids, seed, f"{label}/N{N}", threads=threads, common=common)
        Xd = batch.terminal_values.reshape(reps, d)
        Xdf = Xd + shift.terminal[:reps, None] if shift is not None else Xd
        rank_d = _deviant_ranks(outcome.Xf, Xdf, who)
        pay_d = np.asarray(reward.surface(Xdf, rank_d), dtype=float) - batch.effort_costs.reshape(reps, d)
        results[name] = _mean_se((pay_d - base).mean(axis=1))
    argmax = max(results, key=lambda k: results[k][0])
    return DeviationResult(results[argmax][0], results[argmax][1], argmax, results)


class ValueEstimate(NamedTuple):
    V: float
    stderr: float
    analytic: float
    consistent: bool


def mfg_value(mu_star: EmpiricalMeasure, params: ModelParams, reward: RewardSpec, M: int, seed: int, *,
              grid: TimeGrid | None = None, feedback: OptimalFeedback | None = None, label: str = "value",
              shift: CommonShift | None = None, threads: int = 1) -> ValueEstimate:
    """Monte Carlo E[R_mu*(X_T) - int c a*^2 dt], cross-checked against v(0, 0; mu*).

    Raises ConsistencyError when the two differ by more than 5 standard errors;
    ``consistent`` is False beyond 3.
    """
    feedback = feedback or _feedback(mu_star, params, reward, grid)
    analytic = float(feedback.field.value(0.0, 0.0))
    batch = simulate(feedback, params, feedback.grid, np.arange(M), seed, label, threads=threads)
    X = batch.terminal_values
    mu = mu_star
    if shift is not None:
        w = shift.terminal[np.arange(M) % shift.terminal.size]
        X = X + w
        pay = np.empty(M)
        for j in range(shift.terminal.size):
            sel = np.arange(M) % shift.terminal.size == j
            lifted = mu_star.shift(-shift.terminal[j])
            pay[sel] = np.asarray(reward.surface(X[sel], lifted.cdf(X[sel])), dtype=float)
    else:
        pay = np.asarray(reward.surface(X, mu.cdf(X)), dtype=float)
    pay = pay - batch.effort_costs
    V = float(pay.mean())
    se = float(pay.std(ddof=1) / math.sqrt(M))
    dev = abs(V - analytic)
    if dev > 5.0 * se and dev > 1e-12:
        raise ConsistencyError(f"Monte Carlo value {V:.6g} vs closed form {analytic:.6g} (stderr {se:.2g})")
    return ValueEstimate(V, se, analytic, dev <= 3.0 * se or dev <= 1e-12)


def _feedback(mu_star, params, reward, grid=None) -> OptimalFeedback:
    grid = grid or make_time_grid(params.horizon_T, 500, 4)
    return OptimalFeedback(ValueField(params, reward, mu_star), grid)


# -- report --------------------------------------------------------------------------------


@dataclass
class NashRow:
    N: int
    reps: int
    J_N: float
    stderr: float
    gap: float
    gap_stderr: float
    argmax: str
    theory_bound: float
    abs_diff: float
    abs_diff_stderr: float
    rank_error: float
    rank_error_stderr: float

    def values(self) -> tuple:
        return (self.N, self.J_N, self.stderr, self.gap, self.gap_stderr, self.theory_bound,
                self.abs_diff, self.abs_diff_stderr, self.rank_error, self.rank_error_stderr, self.reps, self.argmax)


@dataclass
class NashReport:
    rows: list[NashRow] = field(default_factory=list)
    V: float = math.nan
    V_stderr: float = math.nan
    V_analytic: float = math.nan
    L: float = 1.0
    alpha: float = 1.0
    seed: int = 0
    label: str = "nplayer"
    extra: dict = field(default_factory=dict)

    @property
    def N_values(self) -> list[int]:
        return [r.N for r in self.rows]

    def fitted_slope(self, column: str = "abs_diff") -> RateFit | None:
        try:
            return rate_fit([(r.N, getattr(r, column)) for r in self.rows])
        except InsufficientDataError:
            return None

    def payoff_table(self) -> list[tuple]:
        """(N, J_N, stderr): the part of the report determined by ranks and effort alone."""
        return [(r.N, r.J_N, r.stderr) for r in self.rows]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            fh.write(",".join(TABLE_HEADER) + "\n")
            for r in self.rows:
                fh.write(",".join(_fmt(v) for v in r.values()) + "\n")
        return path

    def summary(self) -> dict:
        fit = self.fitted_slope()
        rfit = self.fitted_slope("rank_error")
        return {
            "V": self.V,
            "V_stderr": self.V_stderr,
            "V_analytic": self.V_analytic,
            "L": self.L,
            "alpha": self.alpha,
            "seed": self.seed,
            "label": self.label,
            "fitted_slope": None if fit is None else fit.slope,
            "fitted_intercept": None if fit is None else fit.intercept,
            "rank_error_slope": None if rfit is None else rfit.slope,
            "reps": {str(r.N): r.reps for r in self.rows},
            **self.extra,
        }

    def save(self, out_dir, stem: str = "nash") -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table = self.to_csv(out / f"{stem}_table.csv")
        summ = out / f"{stem}_summary.json"
        summ.write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        return [table, summ]


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def reps_for(N: int, L: float, alpha: float, *, path_budget: int = 1 << 17, min_reps: int = 64) -> int:
    """Replications for one rung of the ladder: about ``path_budget`` player paths, at least ``min_reps``."""
    return max(min_reps, int(math.ceil(path_budget / N)))


def verify_nash(mu_star: EmpiricalMeasure, params: ModelParams, reward: RewardSpec, seed: int, *,
                N_values=DEFAULT_LADDER, reps: int | dict | None = None, grid: TimeGrid | None = None,
                family: dict | None = None, deviators: int = 4, value_paths: int = 200_000,
                path_budget: int = 1 << 17, label: str = "nplayer", shift_sigma0: float = 0.0,
                deviations: bool = True, threads: int = 1, log=None) -> NashReport:
    """Run the N ladder: J_N, deviation gaps, |J_N - V| and the rank error.

    The rank error of a replication is the players' mean |F_hat_N(X_i) - F_mu*(X_i)|,
    the quantity the payoff difference is controlled by.

    With ``shift_sigma0`` > 0 every replication draws a common Brownian path W
    from its own stream; the states used for ranking are X + sigma0 * W_T.
    """
    feedback = _feedback(mu_star, params, reward, grid)
    grid = feedback.grid
    if deviations and family is None:
        family = default_family(feedback)
    L, alpha = reward.holder_L, reward.holder_alpha
    reps_map = {}
    for N in N_values:
        if isinstance(reps, dict):
            reps_map[N] = reps[N]
        elif isinstance(reps, int):
            reps_map[N] = reps
        else:
            reps_map[N] = reps_for(N, L, alpha, path_budget=path_budget)
    max_reps = max(reps_map.values()) if reps_map else 1
    shift_for = {}
    if shift_sigma0 > 0:
        for N in N_values:
            shift_for[N] = common_paths(seed, f"common/N{N}", grid, reps_map[N], shift_sigma0)
    value_shift = common_paths(seed, "common/value", grid, 64, shift_sigma0) if shift_sigma0 > 0 else None
    val = mfg_value(mu_star, params, reward, value_paths, seed, feedback=feedback, shift=value_shift,
                    threads=threads)
    report = NashReport(V=val.V, V_stderr=val.stderr, V_analytic=val.analytic, L=L, alpha=alpha, seed=seed,
                        label=label, extra={"value_consistent": val.consistent, "max_reps": max_reps,
                                            "sigma0": shift_sigma0, "grid": grid.spec(),
                                            "deviators_per_rep": deviators})
    for N in N_values:
        R_ = reps_map[N]
        shift = shift_for.get(N)
        out = play(feedback, reward, N, R_, seed, label, shift=shift, threads=threads)
        J, se = _mean_se(out.payoff.mean(axis=1))
        X_for_mu = out.X
        F_mu = mu_star.cdf(X_for_mu)  # rank under mu* in idiosyncratic coordinates
        rank_err = np.abs(out.rank - F_mu).mean(axis=1)
        re, re_se = _mean_se(rank_err)
        if deviations:
            dev = deviation_gap(mu_star, params, reward, N, family, R_, seed, feedback=feedback,
                                deviators=deviators, label=label, shift=shift, outcome=out, threads=threads)
        else:
            dev = DeviationResult(math.nan, math.nan, "", {})
        row = NashRow(N, R_, J, se, dev.gap, dev.stderr, dev.argmax, theory_bound(N, L, alpha),
                      abs(J - val.V), math.hypot(se, val.stderr), re, re_se)
        report.rows.append(row)
        if log:
            log(f"N={N}: J_N={J:.6f} (se {se:.2e}), |J_N-V|={row.abs_diff:.2e}, gap={dev.gap:.2e} "
                f"[{dev.argmax}], rank error={re:.4f}, bound={row.theory_bound:.4f}")
    return report
