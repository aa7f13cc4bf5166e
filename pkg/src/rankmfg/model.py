"""Model constants and rank-dependent terminal rewards."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .errors import DomainError
from .measure import EmpiricalMeasure

RANK_ONLY = "rank_only"
SEPARABLE_MIXED = "separable_mixed"
TABULATED = "tabulated"
KINDS = (RANK_ONLY, SEPARABLE_MIXED, TABULATED)

VALIDATION_GRID = 201
_MONO_TOL = 1e-12


@dataclass(frozen=True)
class ModelParams:
    sigma: float = 1.0
    sigma0: float = 0.0
    cost_c: float = 1.0
    horizon_T: float = 1.0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            out.append("sigma must be > 0")
        if not (self.sigma0 >= 0 and math.isfinite(self.sigma0)):
            out.append("sigma0 must be >= 0")
        if not (self.cost_c > 0 and math.isfinite(self.cost_c)):
            out.append("cost_c must be > 0")
        if not (self.horizon_T > 0 and math.isfinite(self.horizon_T)):
            out.append("horizon_T must be > 0")
        return out

    @property
    def kappa(self) -> float:
        """2 c sigma^2, the Cole-Hopf scale: u = exp(v / kappa)."""
        return 2.0 * self.cost_c * self.sigma**2

    @property
    def common_noise(self) -> bool:
        return self.sigma0 > 0


@dataclass(frozen=True)
class RewardSpec:
    """Terminal payoff surface R(x, r), non-decreasing in state x and rank r.

    ``surface`` must accept broadcastable numpy arrays.  For ``rank_only``
    rewards the x argument is ignored.
    """

    kind: str
    surface: Callable[[np.ndarray, np.ndarray], np.ndarray]
    sup_norm: float
    holder_L: float
    holder_alpha: float
    x_support: tuple[float, float] = (-5.0, 5.0)
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if not (0 < self.holder_alpha <= 1):
            raise ValueError("holder_alpha must lie in (0, 1]")
        if self.holder_L < 0:
            raise ValueError("holder_L must be >= 0")
        if not self.sup_norm >= 0:
            raise ValueError("sup_norm must be >= 0")
        lo, hi = self.x_support
        if not lo < hi:
            raise ValueError("x_support must be an increasing pair")
        self._validate_surface()

    def _validate_surface(self, n: int = VALIDATION_GRID):
        xs = np.linspace(*self.x_support, n)
        rs = np.linspace(0.0, 1.0, n)
        table = np.asarray(self.surface(xs[:, None], rs[None, :]), dtype=float)
        table = np.broadcast_to(table, (n, n))
        if not np.all(np.isfinite(table)):
            raise ValueError("reward surface returned non-finite values")
        if np.max(np.abs(table)) > self.sup_norm * (1 + 1e-12) + 1e-15:
            raise ValueError("reward exceeds its declared sup_norm on the validation grid")
        if np.any(np.diff(table, axis=1) < -_MONO_TOL):
            raise ValueError("reward is not non-decreasing in rank")
        if np.any(np.diff(table, axis=0) < -_MONO_TOL):
            raise ValueError("reward is not non-decreasing in state")
        if self.kind == RANK_ONLY and np.ptp(table, axis=0).max() > 0:
            raise ValueError("rank_only reward depends on the state")

    @property
    def rank_only(self) -> bool:
        return self.kind == RANK_ONLY

    def __call__(self, x, r):
        return reward_eval(self, x, r)

    def rank_levels(self, r) -> np.ndarray:
        """R(., r) for a rank-only reward."""
        r = np.asarray(r, dtype=float)
        return np.broadcast_to(np.asarray(self.surface(np.zeros_like(r), r), dtype=float), r.shape)

    def scaled(self, factor: float) -> "RewardSpec":
        if factor < 0:
            raise ValueError("scale factor must be non-negative")
        base = self.surface
        return RewardSpec(
            kind=self.kind,
            surface=lambda x, r: factor * base(x, r),
            sup_norm=factor * self.sup_norm,
            holder_L=factor * self.holder_L,
            holder_alpha=self.holder_alpha,
            x_support=self.x_support,
            name=f"{self.name}*{factor:g}",
            params={**self.params, "scale_factor": factor},
        )


# -- reward constructors -------------------------------------------------------


def rank_reward(fn, *, sup_norm, holder_L, holder_alpha=1.0, name="custom", params=None) -> RewardSpec:
    """Purely rank-based reward from a vectorized function of the rank."""
    return RewardSpec(
        kind=RANK_ONLY,
        surface=lambda x, r: np.broadcast_to(fn(np.asarray(r, dtype=float)), np.broadcast(x, r).shape),
        sup_norm=float(sup_norm),
        holder_L=float(holder_L),
        holder_alpha=float(holder_alpha),
        name=name,
        params=params or {},
    )


def constant_reward(value: float = 0.0) -> RewardSpec:
    return rank_reward(
        lambda r: np.full_like(r, value), sup_norm=abs(value), holder_L=0.0,
        name="constant", params={"value": value},
    )


def linear_rank_reward(scale: float = 1.0) -> RewardSpec:
    """R(x, r) = scale * r, the benchmark tournament payoff."""
    if scale < 0:
        raise ValueError("scale must be >= 0 for a monotone reward")
    return rank_reward(lambda r: scale * r, sup_norm=scale, holder_L=scale, name="linear", params={"scale": scale})


def power_rank_reward(scale: float = 1.0, power: float = 1.0) -> RewardSpec:
    """R(x, r) = scale * r**power; Hoelder exponent min(power, 1)."""
    if scale < 0 or power <= 0:
        raise ValueError("power reward needs scale >= 0 and power > 0")
    alpha = min(power, 1.0)
    L = scale * max(power, 1.0)
    return rank_reward(
        lambda r: scale * r**power, sup_norm=scale, holder_L=L, holder_alpha=alpha,
        name="power", params={"scale": scale, "power": power},
    )


def mixed_reward(state_weight: float = 0.5, rank_weight: float = 1.0, width: float = 1.0,
                 power: float = 1.0, x_support=(-5.0, 5.0)) -> RewardSpec:
    """R(x, r) = state_weight * tanh(x / width) + rank_weight * r**power."""
    if state_weight < 0 or rank_weight < 0 or width <= 0 or power <= 0:
        raise ValueError("mixed reward parameters must be non-negative (width, power > 0)")

    def surface(x, r):
        x = np.asarray(x, dtype=float)
        r = np.asarray(r, dtype=float)
        return state_weight * np.tanh(x / width) + rank_weight * r**power

    return RewardSpec(
        kind=SEPARABLE_MIXED,
        surface=surface,
        sup_norm=state_weight + rank_weight,
        holder_L=rank_weight * max(power, 1.0),
        holder_alpha=min(power, 1.0),
        x_support=tuple(x_support),
        name="mixed",
        params={"state_weight": state_weight, "rank_weight": rank_weight, "width": width, "power": power},
    )


TEMPLATES = {
    "zero": lambda: constant_reward(0.0),
    "constant": constant_reward,
    "linear": linear_rank_reward,
    "power": power_rank_reward,
    "mixed": mixed_reward,
}


def reward_from_template(name: str, **params) -> RewardSpec:
    try:
        factory = TEMPLATES[name]
    except KeyError:
        raise ValueError(f"unknown reward template {name!r}; choose from {sorted(TEMPLATES)}") from None
    return factory(**params)


def tabulated_reward(x_grid, r_grid, table, *, holder_L=None, holder_alpha=1.0, name="table") -> RewardSpec:
    """Bilinear interpolation of a payoff table indexed [x, r]; x is clamped to the grid."""
    xg = np.asarray(x_grid, dtype=float)
    rg = np.asarray(r_grid, dtype=float)
    tab = np.asarray(table, dtype=float)
    if tab.shape != (xg.size, rg.size):
        raise ValueError(f"table shape {tab.shape} does not match grids ({xg.size}, {rg.size})")
    if xg.size < 2 or rg.size < 2 or np.any(np.diff(xg) <= 0) or np.any(np.diff(rg) <= 0):
        raise ValueError("table grids must be strictly increasing with at least two nodes")
    if rg[0] > 0 or rg[-1] < 1:
        raise ValueError("rank grid must cover [0, 1]")
    if np.any(np.diff(tab, axis=0) < 0) or np.any(np.diff(tab, axis=1) < 0):
        raise ValueError("tabulated reward must be non-decreasing in both arguments")
    if holder_L is None:
        holder_L = float(np.max(np.diff(tab, axis=1) / np.diff(rg)[None, :]))

    def surface(x, r):
        x, r = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(r, dtype=float))
        xc = np.clip(x, xg[0], xg[-1])
        i = np.clip(np.searchsorted(xg, xc, side="right") - 1, 0, xg.size - 2)
        j = np.clip(np.searchsorted(rg, r, side="right") - 1, 0, rg.size - 2)
        tx = (xc - xg[i]) / (xg[i + 1] - xg[i])
        tr = (r - rg[j]) / (rg[j + 1] - rg[j])
        return ((1 - tx) * (1 - tr) * tab[i, j] + tx * (1 - tr) * tab[i + 1, j]
                + (1 - tx) * tr * tab[i, j + 1] + tx * tr * tab[i + 1, j + 1])

    return RewardSpec(
        kind=TABULATED,
        surface=surface,
        sup_norm=float(np.max(np.abs(tab))),
        holder_L=float(holder_L),
        holder_alpha=float(holder_alpha),
        x_support=(float(xg[0]), float(xg[-1])),
        name=name,
    )


def load_reward_table(path, **kwargs) -> RewardSpec:
    """Read a table file: x-grid line, r-grid line, then one row of payoffs per x node."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) < 3:
        raise ValueError(f"{path}: expected two grid lines and at least one payoff row")
    parse = lambda ln: [float(v) for v in ln.split(",")]
    xg, rg = parse(lines[0]), parse(lines[1])
    table = [parse(ln) for ln in lines[2:]]
    return tabulated_reward(xg, rg, table, name=Path(path).stem, **kwargs)


# -- operations ----------------------------------------------------------------


def reward_eval(spec: RewardSpec, x, r):
    r_arr = np.asarray(r, dtype=float)
    if np.any((r_arr < 0) | (r_arr > 1)) or np.any(np.isnan(r_arr)):
        raise DomainError("rank must lie in [0, 1]")
    out = np.asarray(spec.surface(np.asarray(x, dtype=float), r_arr), dtype=float)
    return out if out.ndim else float(out)


def rank_reward_eval(spec: RewardSpec, mu: EmpiricalMeasure, x, regular: bool = False):
    """R_mu(x) = R(x, F_mu(x)); ``regular`` switches to the midpoint CDF."""
    rank = mu.regular_cdf(x) if regular else mu.cdf(x)
    return reward_eval(spec, x, rank)


def monotonicity_pairing(spec: RewardSpec, mu: EmpiricalMeasure, nu: EmpiricalMeasure,
                         regular: bool = False) -> float:
    """Signed integral of (R_mu - R_nu) against (mu - nu), summed over the union of atoms."""
    z = np.union1d(mu.locations, nu.locations)
    w_mu = _weights_on(mu, z)
    w_nu = _weights_on(nu, z)
    diff = rank_reward_eval(spec, mu, z, regular) - rank_reward_eval(spec, nu, z, regular)
    return float(np.sum(np.asarray(diff) * (w_mu - w_nu)))


def _weights_on(mu: EmpiricalMeasure, z: np.ndarray) -> np.ndarray:
    out = np.zeros(z.size)
    out[np.searchsorted(z, mu.locations)] = mu.weights
    return out


class HolderCheck(NamedTuple):
    L_hat: float
    alpha: float
    ok: bool


def holder_estimate(spec: RewardSpec, grid_size: int = VALIDATION_GRID) -> HolderCheck:
    """Scan (x, r1, r2) triples and compare against the declared Hoelder constant."""
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    xs = np.linspace(*spec.x_support, grid_size)
    rs = np.linspace(0.0, 1.0, grid_size)
    table = np.broadcast_to(np.asarray(spec.surface(xs[:, None], rs[None, :]), dtype=float),
                            (grid_size, grid_size))
    i, j = np.triu_indices(grid_size, k=1)
    dr = (rs[j] - rs[i]) ** spec.holder_alpha
    L_hat = 0.0
    ok = True
    for row in table:
        dR = np.abs(row[j] - row[i])
        L_hat = max(L_hat, float(np.max(dR / dr)))
        ok &= bool(np.all(dR <= spec.holder_L * dr + 1e-12))
    return HolderCheck(L_hat, spec.holder_alpha, ok)
