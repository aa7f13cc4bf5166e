"""Randomized rank-only value-function cases shared by the unit and acceptance suites."""

import numpy as np

from rankmfg.measure import EmpiricalMeasure
from rankmfg.model import ModelParams, constant_reward, linear_rank_reward, power_rank_reward
from rankmfg.value import ValueField, lemma_bounds


def random_case(gen):
    params = ModelParams(sigma=gen.uniform(0.3, 2), cost_c=gen.uniform(0.2, 2), horizon_T=gen.uniform(0.5, 2))
    kind = gen.integers(3)
    if kind == 0:
        reward = linear_rank_reward(gen.uniform(0.1, 3))
    elif kind == 1:
        reward = power_rank_reward(gen.uniform(0.1, 3), gen.uniform(0.2, 3))
    else:
        reward = constant_reward(gen.uniform(-2, 2))
    n = int(gen.integers(1, 12))
    mu = EmpiricalMeasure(gen.normal(0, 1.5, n), gen.dirichlet(np.ones(n)))
    t = gen.uniform(0, 0.999) * params.horizon_T
    return params, reward, mu, t


def check_bounds(params, reward, mu, t, x, tol=1e-9):
    """Indices of the six derivative bounds violated at (t, x) by more than ``tol``."""
    f = ValueField(params, reward, mu)
    b = lemma_bounds(params, reward, t)
    u, ux, uxx = f.u_derivatives(t, x)
    v, vx, _ = f.value_and_drift(t, x)
    vxx = f.v_xx(t, x)
    checks = [
        np.all(u >= b.u_min - tol) and np.all(u <= b.u_max + tol),
        np.all(ux >= -tol) and np.all(ux <= b.u_x_max + tol),
        np.all(np.abs(uxx) <= b.u_xx_abs_max + tol),
        np.all(v >= b.v_min - tol) and np.all(v <= b.v_max + tol),
        np.all(vx >= -tol) and np.all(vx <= b.v_x_max + tol),
        np.all(np.abs(vxx) <= b.v_xx_abs_max + tol),
    ]
    return [i for i, ok in enumerate(checks) if not ok]
