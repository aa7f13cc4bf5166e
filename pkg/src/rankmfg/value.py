"""Closed-form value function of the single-agent problem against a fixed population law.

With u = exp(v / kappa), kappa = 2 c sigma^2, the HJB equation becomes the
backward heat equation, so u(t, x) = E[g(x + s Z)] where s = sigma sqrt(T - t)
and g = exp(R_mu / kappa).  For an atomic mu, g jumps at the atoms; every
evaluator here treats those jumps analytically through normal CDF sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numba
import numpy as np
from scipy import fft as sfft
from scipy.special import ndtr, roots_hermitenorm

from .errors import DomainError, UnsupportedMethodError
from .measure import EmpiricalMeasure
from .model import ModelParams, RewardSpec, rank_reward_eval

EXACT_STEP = "exact_step"
GAUSS_HERMITE = "gauss_hermite"
MIN_TIME_TO_GO = 1e-8
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_CHUNK_ELEMS = 4_000_000


def _pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


@lru_cache(maxsize=8)
def _gh_rule(n: int) -> tuple[np.ndarray, np.ndarray]:
    z, w = roots_hermitenorm(n)
    return z, w / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class QuadratureConfig:
    method: str | None = None  # None picks exact_step whenever it applies
    gh_nodes: int = 128
    z_cutoff: float = 8.0

    def __post_init__(self):
        if self.method not in (None, EXACT_STEP, GAUSS_HERMITE):
            raise ValueError(f"unknown quadrature method {self.method!r}")
        if self.gh_nodes < 8:
            raise ValueError("gh_nodes must be >= 8")
        if self.z_cutoff <= 0:
            raise ValueError("z_cutoff must be positive")


class Derivatives(NamedTuple):
    u: np.ndarray
    u_x: np.ndarray
    u_xx: np.ndarray


class ValueAndDrift(NamedTuple):
    v: np.ndarray
    v_x: np.ndarray
    a_star: np.ndarray


@dataclass(frozen=True)
class BoundSet:
    K: float
    u_min: float
    u_max: float
    v_min: float
    v_max: float
    u_x_max: float
    v_x_max: float
    u_xx_abs_max: float
    v_xx_abs_max: float
    effort_cap: float


class ValueField:
    """Evaluator for u, v and the optimal drift against a fixed terminal law ``mu``."""

    def __init__(self, params: ModelParams, reward: RewardSpec, mu: EmpiricalMeasure,
                 quad: QuadratureConfig | None = None):
        self.params = params
        self.reward = reward
        self.mu = mu
        self.quad = quad or QuadratureConfig()
        if self.quad.method == EXACT_STEP and not reward.rank_only:
            raise UnsupportedMethodError("exact_step needs a rank-only reward")
        self.method = self.quad.method or (EXACT_STEP if reward.rank_only else GAUSS_HERMITE)
        kappa = params.kappa
        y = mu.locations
        cum = mu.cumulative
        left = np.concatenate([[0.0], cum[:-1]])
        if reward.rank_only:
            levels = reward.rank_levels(np.concatenate([[0.0], cum]))
            g = np.exp(levels / kappa)
            self.g_levels = g
            self.jumps = np.diff(g)
        else:
            self.g_levels = None
            upper = np.exp(np.asarray(reward.surface(y, cum), dtype=float) / kappa)
            lower = np.exp(np.asarray(reward.surface(y, left), dtype=float) / kappa)
            self.jumps = upper - lower
        self._cum_jumps = np.cumsum(self.jumps)
        self.g_floor = float(self.g_levels[0]) if reward.rank_only else None
        if reward.rank_only:
            self.slopes = None
        else:
            # x-derivative of the jump at each atom; subtracting the matching
            # linear ramps leaves a C^1 remainder for the Gauss-Hermite rule
            d = 1e-5 * (1.0 + np.abs(y))
            up = lambda z, r: np.exp(np.asarray(reward.surface(z, r), dtype=float) / kappa)
            self.slopes = ((up(y + d, cum) - up(y + d, left)) - (up(y - d, cum) - up(y - d, left))) / (2.0 * d)
            self._cum_slopes = np.cumsum(self.slopes)
            self._cum_slopes_y = np.cumsum(self.slopes * y)

    # -- helpers -------------------------------------------------------------

    def scale(self, t: float) -> float:
        T = self.params.horizon_T
        if t >= T:
            raise DomainError("derivative formulas need t < T; use terminal_value at t = T")
        if t < 0:
            raise DomainError("t must be >= 0")
        return self.params.sigma * math.sqrt(max(T - t, MIN_TIME_TO_GO))

    def terminal_value(self, x):
        return rank_reward_eval(self.reward, self.mu, x)

    def _g(self, y):
        """exp(R_mu(y) / kappa), right-continuous."""
        return np.exp(np.asarray(self.reward.surface(y, self.mu.cdf(y)), dtype=float) / self.params.kappa)

    def _jump_sums(self, x: np.ndarray, s: float):
        """sum_k J_k * (Phi, phi/s, -z phi/s^2) evaluated at z_k = (x - y_k)/s."""
        y = self.mu.locations
        J = self.jumps
        u = np.empty(x.size)
        ux = np.empty(x.size)
        uxx = np.empty(x.size)
        step = max(1, _CHUNK_ELEMS // max(y.size, 1))
        D = self.slopes
        for lo in range(0, x.size, step):
            z = (x[lo:lo + step, None] - y[None, :]) / s
            dens = _pdf(z)
            cdf = ndtr(z)
            u[lo:lo + step] = cdf @ J
            ux[lo:lo + step] = (dens @ J) / s
            uxx[lo:lo + step] = -((z * dens) @ J) / (s * s)
            if D is not None:
                # E[(x + sZ - y_k)^+] = s (phi(z) + z Phi(z)) and its x-derivatives
                u[lo:lo + step] += s * ((dens + z * cdf) @ D)
                ux[lo:lo + step] += cdf @ D
                uxx[lo:lo + step] += (dens @ D) / s
        return u, ux, uxx

    # -- evaluators ------------------------------------------------------------

    def u_derivatives(self, t: float, x) -> Derivatives:
        x_arr = np.atleast_1d(np.asarray(x, dtype=float))
        s = self.scale(t)
        ju, jux, juxx = self._jump_sums(x_arr.ravel(), s)
        if self.method == EXACT_STEP:
            u = self.g_floor + ju
            ux, uxx = jux, juxx
        else:
            cu, cux, cuxx = self._continuous_part(x_arr.ravel(), s)
            u, ux, uxx = ju + cu, jux + cux, juxx + cuxx
        shape = np.shape(x)
        return Derivatives(*(a.reshape(shape) if shape else float(a[0]) for a in (u, ux, uxx)))

    def _staircase(self, pts):
        """Jumps plus linear ramps: sum over y_k <= y of J_k + D_k (y - y_k)."""
        idx = np.searchsorted(self.mu.locations, pts, side="right")
        k = np.maximum(idx - 1, 0)
        on = idx > 0
        out = np.where(on, self._cum_jumps[k], 0.0)
        if self.slopes is not None:
            out += np.where(on, pts * self._cum_slopes[k] - self._cum_slopes_y[k], 0.0)
        return out

    def _continuous_part(self, x: np.ndarray, s: float):
        """Gauss-Hermite on g minus its staircase of jumps and ramps (a C^1 integrand)."""
        z, w = _gh_rule(self.quad.gh_nodes)
        cu = np.empty(x.size)
        cux = np.empty(x.size)
        cuxx = np.empty(x.size)
        step = max(1, _CHUNK_ELEMS // z.size)
        for lo in range(0, x.size, step):
            pts = x[lo:lo + step, None] + s * z[None, :]
            gc = self._g(pts) - self._staircase(pts)
            cu[lo:lo + step] = gc @ w
            cux[lo:lo + step] = (gc @ (w * z)) / s
            cuxx[lo:lo + step] = (gc @ (w * (z * z - 1.0))) / (s * s)
        return cu, cux, cuxx

    def value_and_drift(self, t: float, x) -> ValueAndDrift:
        u, ux, _ = self.u_derivatives(t, x)
        kappa = self.params.kappa
        v = kappa * np.log(u)
        vx = kappa * np.asarray(ux) / np.asarray(u)
        return ValueAndDrift(v, vx, vx / (2.0 * self.params.cost_c))

    def v_xx(self, t: float, x):
        u, ux, uxx = self.u_derivatives(t, x)
        r = np.asarray(ux) / np.asarray(u)
        return self.params.kappa * (np.asarray(uxx) / np.asarray(u) - r * r)

    def value(self, t: float, x):
        if t == self.params.horizon_T:
            return self.terminal_value(x)
        return self.value_and_drift(t, x).v

    def drift(self, t: float, x):
        return self.value_and_drift(t, x).a_star

    def drift_table(self, t: float, **kwargs) -> "DriftTable":
        return build_drift_table(self, t, **kwargs)


# -- module-level operations ------------------------------------------------------


def u_derivatives(field: ValueField, t: float, x) -> Derivatives:
    return field.u_derivatives(t, x)


def value_and_drift(field: ValueField, t: float, x) -> ValueAndDrift:
    return field.value_and_drift(t, x)


def lemma_bounds(params: ModelParams, reward: RewardSpec, t: float) -> BoundSet:
    """Estimates on u, v and their x-derivatives that hold for every population law."""
    T = params.horizon_T
    if t >= T:
        raise DomainError("bounds are stated for t < T")
    tau = T - t
    sig, c, R = params.sigma, params.cost_c, reward.sup_norm
    K = math.exp(R / params.kappa)
    root = math.sqrt(2.0 / math.pi)
    return BoundSet(
        K=K,
        u_min=1.0 / K,
        u_max=K,
        v_min=-R,
        v_max=R,
        u_x_max=K / sig * root / math.sqrt(tau),
        v_x_max=2.0 * c * sig * K**2 * root / math.sqrt(tau),
        u_xx_abs_max=2.0 * K / (sig**2 * tau),
        v_xx_abs_max=4.0 * c * K**2 * (1.0 + K**2 / math.pi) / tau,
        effort_cap=2.0 * sig * K**2 * math.sqrt(2.0 * tau / math.pi),
    )


def pde_residual(field: ValueField, t: float, x, fd_step: float = 1e-4):
    """v_t + sigma^2 v_xx / 2 + v_x^2 / (4c); v_t by finite differences in t, the rest analytic."""
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    if t + fd_step >= field.params.horizon_T:
        raise DomainError("t + fd_step must stay below T")
    h = fd_step
    v = lambda tt: np.asarray(field.value_and_drift(tt, x).v)
    if t >= h:
        v_t = (v(t + h) - v(t - h)) / (2.0 * h)
    else:
        if t + 2 * h >= field.params.horizon_T:
            raise DomainError("not enough room for a one-sided difference")
        v_t = (-3.0 * v(t) + 4.0 * v(t + h) - v(t + 2 * h)) / (2.0 * h)
    _, v_x, _ = field.value_and_drift(t, x)
    v_xx = field.v_xx(t, x)
    p = field.params
    res = v_t + 0.5 * p.sigma**2 * v_xx + np.asarray(v_x) ** 2 / (4.0 * p.cost_c)
    return res if np.ndim(res) else float(res)


# -- tabulated drift for simulation -------------------------------------------------


def _hermite_e_table(w: np.ndarray, order: int) -> list[np.ndarray]:
    he = [np.ones_like(w), w.copy()]
    for n in range(1, order):
        he.append(w * he[n] - n * he[n - 1])
    return he


@lru_cache(maxsize=4)
def _kernels(ratio: int, order: int, cutoff: float):
    """Kernels on the node lattice w = d / ratio for the moment expansion of the jump sums."""
    W = int(math.ceil(cutoff * ratio))
    d = np.arange(-W, W + 1)
    w = d / ratio
    dens = _pdf(w)
    he = _hermite_e_table(w, order + 2)
    fact = [math.factorial(m) for m in range(order + 1)]
    k_u = [ndtr(w) - (d >= 0)] + [-he[m - 1] * dens / fact[m] for m in range(1, order + 1)]
    k_ux = [he[m] * dens / fact[m] for m in range(order + 1)]
    k_uxx = [-he[m + 1] * dens / fact[m] for m in range(order + 1)]
    # psi(w) = phi(w) + w Phi(w) = E[(w + Z)^+], for the ramps; w^+ and H are added back exactly
    k_psi = [dens + w * ndtr(w) - np.maximum(w, 0.0), -(ndtr(w) - (d >= 0))]
    k_psi += [he[m - 2] * dens / fact[m] for m in range(2, order + 1)]
    return W, np.array(k_u), np.array(k_ux), np.array(k_uxx), np.array(k_psi)


@numba.njit(cache=True, nogil=True)
def _hermite_eval(x, lo, h, f, df, out):
    n = f.size
    hi = lo + h * (n - 1)
    for k in range(x.size):
        xk = x[k]
        if xk < lo or xk > hi or n < 2:
            continue
        pos = (xk - lo) / h
        i = int(pos)
        if i > n - 2:
            i = n - 2
        tau = pos - i
        tau2 = tau * tau
        tau3 = tau2 * tau
        out[k] = ((2.0 * tau3 - 3.0 * tau2 + 1.0) * f[i] + (tau3 - 2.0 * tau2 + tau) * h * df[i]
                  + (3.0 * tau2 - 2.0 * tau3) * f[i + 1] + (tau3 - tau2) * h * df[i + 1])


class DriftTable:
    """Optimal drift and its x-derivative on a uniform lattice, read back by
    cubic Hermite interpolation.

    Outside the lattice the drift is taken as zero for rank-only rewards (the
    lattice extends ``z_cutoff`` standard deviations past the outermost atoms);
    for state-dependent rewards points outside are evaluated directly.
    """

    def __init__(self, t, lo, h, u, ux, uxx, sigma, fallback=None):
        self.t = t
        self.lo = lo
        self.h = h
        self.u = u
        self.ux = ux
        self.uxx = uxx
        ratio = ux / u
        self.a = sigma**2 * ratio
        self.a_x = sigma**2 * (uxx / u - ratio * ratio)
        self.hi = lo + h * (u.size - 1)
        self._fallback = fallback

    @property
    def nodes(self) -> np.ndarray:
        return self.lo + self.h * np.arange(self.u.size)

    def a_star(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        flat = x.ravel()
        out = np.zeros(flat.size)
        _hermite_eval(flat, self.lo, self.h, self.a, self.a_x, out)
        if self._fallback is not None:
            outside = (flat < self.lo) | (flat > self.hi)
            if np.any(outside):
                out[outside] = self._fallback(flat[outside])
        return out.reshape(x.shape)

    __call__ = a_star


def build_drift_table(field: ValueField, t: float, ratio: int = 16, order: int = 5,
                      x_range: tuple[float, float] | None = None) -> DriftTable:
    """Tabulate the optimal drift at time ``t``.

    Atoms are assigned to the nearest lattice node and the offset is carried by
    a moment (multipole) expansion of the normal kernels up to ``order``, so the
    jump sums are reproduced to roughly ((1/(2 ratio))**(order+1)) / (order+1)!
    relative accuracy; the convolutions run through FFTs.
    """
    s = field.scale(t)
    h = s / ratio
    y = field.mu.locations
    J = field.jumps
    cutoff = field.quad.z_cutoff
    W, k_u, k_ux, k_uxx, k_psi = _kernels(ratio, order, cutoff)
    pad = (W + 2) * h
    lo, hi = y[0] - pad, y[-1] + pad
    if x_range is not None:
        lo, hi = min(lo, x_range[0]), max(hi, x_range[1])
    n = int(math.ceil((hi - lo) / h)) + 1
    b = np.rint((y - lo) / h).astype(np.int64)
    e = (y - (lo + b * h)) / s
    def binned(weights):
        out = np.empty((order + 1, n))
        em = weights.copy()
        for m in range(order + 1):
            out[m] = np.bincount(b, weights=em, minlength=n)
            em = em * e
        return out

    moments = binned(J)
    size = sfft.next_fast_len(n + 2 * W, real=True)

    def conv(M_hat, kernels):
        K_hat = sfft.rfft(kernels, size, axis=1)
        full = sfft.irfft(np.sum(M_hat * K_hat, axis=0), size)
        return full[W:W + n]

    M_hat = sfft.rfft(moments, size, axis=1)
    ux = conv(M_hat, k_ux) / s
    uxx = conv(M_hat, k_uxx) / (s * s)
    u = np.cumsum(moments[0]) + conv(M_hat, k_u)
    if field.slopes is not None:
        ramps = binned(field.slopes)
        R_hat = sfft.rfft(ramps, size, axis=1)
        idx = np.arange(n)
        c0 = np.cumsum(ramps[0])
        exact = (idx * c0 - np.cumsum(idx * ramps[0])) / ratio - np.cumsum(ramps[1])
        u = u + s * (conv(R_hat, k_psi) + exact)
        ux = ux + conv(R_hat, k_u) + c0
        uxx = uxx + conv(R_hat, k_ux) / s
    nodes = lo + h * np.arange(n)
    fallback = None
    if field.method == EXACT_STEP:
        u = u + field.g_floor
    else:
        cu, cux, cuxx = field._continuous_part(nodes, s)
        u, ux, uxx = u + cu, ux + cux, uxx + cuxx
        fallback = lambda xs: np.asarray(field.drift(t, xs))
    return DriftTable(t, lo, h, u, ux, uxx, field.params.sigma, fallback)
