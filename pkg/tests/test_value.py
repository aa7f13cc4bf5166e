import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rankmfg import DomainError, UnsupportedMethodError
from rankmfg.measure import EmpiricalMeasure
from rankmfg.model import ModelParams, constant_reward, linear_rank_reward, mixed_reward, power_rank_reward
from rankmfg.value import (GAUSS_HERMITE, EXACT_STEP, QuadratureConfig, ValueField, build_drift_table,
                           lemma_bounds, pde_residual, u_derivatives, value_and_drift)

from cases import check_bounds, random_case
from oracles import u_trapezoid

E = math.e
HALF = ModelParams(sigma=1.0, cost_c=0.5, horizon_T=1.0)
DIRAC = EmpiricalMeasure.dirac(0.0)

# Frozen reference values for R = r, mu = delta_0, c = 1/2, sigma = T = 1, (t, x) = (0, 0).
U_REF = (1.0 + E) / 2.0  # 1.8591409142295225
UX_REF = (E - 1.0) / math.sqrt(2.0 * math.pi)  # 0.6854952710177948
A_REF = UX_REF / U_REF  # 0.36871614505987155
V_REF = math.log(U_REF)  # 0.6201145069582775


def field(reward, mu=DIRAC, params=HALF, **quad):
    return ValueField(params, reward, mu, QuadratureConfig(**quad) if quad else None)


def test_zero_reward_gives_unit_u():
    f = field(constant_reward(0.0), EmpiricalMeasure.uniform([-1.0, 2.0]))
    u, ux, uxx = u_derivatives(f, 0.3, np.array([-2.0, 0.0, 5.0]))
    assert np.all(u == 1.0) and np.all(ux == 0.0) and np.all(uxx == 0.0)
    assert value_and_drift(f, 0.3, 1.0) == (0.0, 0.0, 0.0)


def test_constant_reward_one():
    f = field(constant_reward(1.0))
    u, ux, uxx = u_derivatives(f, 0.0, 0.7)
    assert u == pytest.approx(E, rel=1e-15) and ux == 0.0 and uxx == 0.0
    v, vx, a = value_and_drift(f, 0.0, 0.7)
    assert v == pytest.approx(1.0, rel=1e-15) and vx == 0.0 and a == 0.0


def test_two_level_example_matches_frozen_values():
    f = field(linear_rank_reward())
    u, ux, uxx = f.u_derivatives(0.0, 0.0)
    assert u == pytest.approx(U_REF, rel=1e-15)
    assert ux == pytest.approx(UX_REF, rel=1e-14)
    assert uxx == pytest.approx(0.0, abs=1e-15)
    v, vx, a = f.value_and_drift(0.0, 0.0)
    assert v == pytest.approx(V_REF, rel=1e-14)
    assert a == pytest.approx(A_REF, rel=1e-14)
    assert vx == pytest.approx(2 * 0.5 * a, rel=1e-14)
    # printed approximations of the same quantities (rounded in the source)
    assert u == pytest.approx(1.859140914, abs=1e-9)
    assert v == pytest.approx(0.620114507, abs=1e-9)
    assert ux == pytest.approx(0.685517746, rel=5e-5)
    assert a == pytest.approx(0.368729, rel=5e-5)


def test_two_level_example_against_trapezoid_oracle():
    f = field(linear_rank_reward())
    for t, x in [(0.0, 0.0), (0.5, 0.3), (0.9, -0.2)]:
        s = f.scale(t)
        ref = u_trapezoid(lambda y, r: r, [0.0], [1.0], 1.0, s, x)
        got = f.u_derivatives(t, x)
        np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-9)


def test_drift_matches_finite_difference_of_v():
    f = field(linear_rank_reward(), EmpiricalMeasure.uniform([-0.5, 0.1, 0.8]), ModelParams(1.3, 0, 0.7, 2.0))
    h = 1e-4
    for t in (0.0, 1.0, 1.7):
        x = np.linspace(-2, 2, 17)
        v = lambda xx: np.asarray(f.value(t, xx))
        fd = (v(x + h) - v(x - h)) / (2 * h)
        _, vx, _ = f.value_and_drift(t, x)
        assert np.max(np.abs(fd - vx)) <= max(1e-6, 10 * h * h * 50)
        fd2 = (v(x + h) - 2 * v(x) + v(x - h)) / (h * h)
        assert np.max(np.abs(fd2 - f.v_xx(t, x))) <= 1e-3


def test_domain_errors():
    f = field(linear_rank_reward())
    with pytest.raises(DomainError):
        f.u_derivatives(1.0, 0.0)
    with pytest.raises(DomainError):
        f.value_and_drift(1.5, 0.0)
    with pytest.raises(DomainError):
        f.u_derivatives(-0.1, 0.0)
    with pytest.raises(UnsupportedMethodError):
        field(mixed_reward(), method=EXACT_STEP)
    with pytest.raises(ValueError):
        QuadratureConfig(gh_nodes=4)
    with pytest.raises(ValueError):
        QuadratureConfig(method="simpson")


def test_terminal_value_at_T():
    f = field(linear_rank_reward(), EmpiricalMeasure.uniform([0, 1]))
    assert f.value(1.0, 0.5) == 0.5


def test_auto_method_selection():
    assert field(linear_rank_reward()).method == EXACT_STEP
    assert field(mixed_reward()).method == GAUSS_HERMITE


# -- Lemma bounds ----------------------------------------------------------------------


def test_lemma_bounds_examples():
    R = linear_rank_reward()
    b = lemma_bounds(HALF, R, 0.0)
    assert b.K == pytest.approx(E, rel=1e-15)
    assert b.v_x_max == pytest.approx(2 * 0.5 * E**2 * math.sqrt(2 / math.pi), rel=1e-15)
    assert b.v_x_max == pytest.approx(5.895613780243015, rel=1e-14)
    assert b.v_x_max == pytest.approx(5.8950, rel=2e-4)  # printed value, rounded
    assert b.effort_cap == pytest.approx(11.79122756048603, rel=1e-14)
    assert b.effort_cap == pytest.approx(11.7900, rel=2e-4)
    assert (b.u_min, b.u_max, b.v_min, b.v_max) == pytest.approx((1 / E, E, -1.0, 1.0))
    with pytest.raises(DomainError):
        lemma_bounds(HALF, R, 1.0)


def test_bound_suite_small():
    gen = np.random.default_rng(2024)
    for _ in range(100):
        params, reward, mu, t = random_case(gen)
        x = gen.normal(0, 3, 5)
        assert check_bounds(params, reward, mu, t, x) == []


def test_decay_at_infinity():
    mu = EmpiricalMeasure.uniform([-1.0, 0.0, 2.0])
    f = field(power_rank_reward(2.0, 0.5), mu, ModelParams(0.8, 0, 1.0, 1.0))
    for t in (0.0, 0.5, 0.99):
        s = f.scale(t)
        far = np.array([-1.0 - 10 * s - 0.1, 2.0 + 10 * s + 0.1, 50.0, -50.0])
        assert np.all(np.abs(f.drift(t, far)) <= 1e-6)


def test_terminal_consistency():
    mu = EmpiricalMeasure.uniform([-0.5, 0.0, 0.4, 1.0])
    R = power_rank_reward(1.0, 2.0)
    f = field(R, mu, ModelParams(1.0, 0, 1.0, 1.0))
    x = np.array([-1.0, -0.3, 0.2, 0.7, 1.5])
    v = np.asarray(f.value(1.0 - 1e-6, x))
    from rankmfg.model import rank_reward_eval
    np.testing.assert_allclose(v, rank_reward_eval(R, mu, x), atol=1e-3)


# -- quadrature agreement -------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_exact_step_vs_gauss_hermite(seed):
    gen = np.random.default_rng(seed)
    params, reward, mu, t = random_case(gen)
    x = gen.normal(0, 2, 4)
    ex = ValueField(params, reward, mu, QuadratureConfig(EXACT_STEP)).u_derivatives(t, x)
    gh = ValueField(params, reward, mu, QuadratureConfig(GAUSS_HERMITE)).u_derivatives(t, x)
    np.testing.assert_allclose(gh.u, ex.u, rtol=1e-6)


def test_gauss_hermite_state_dependent_against_trapezoid():
    # after removing jumps and linear ramps the remainder is only C^1 at the
    # atoms, so the rule converges algebraically: ~1e-5 at 128 nodes, ~1e-6 at 1024
    gen = np.random.default_rng(5)
    R = mixed_reward(0.6, 1.0, 0.8, 1.5)
    mu = EmpiricalMeasure.from_samples(gen.normal(0, 1, 6))
    params = ModelParams(0.9, 0, 0.7, 1.0)
    coarse, fine = field(R, mu, params), field(R, mu, params, gh_nodes=1024)
    for t, x in [(0.0, 0.1), (0.6, -0.7), (0.95, 0.4)]:
        ref = u_trapezoid(R.surface, mu.locations, mu.weights, params.kappa, coarse.scale(t), x)
        got = coarse.u_derivatives(t, x)
        np.testing.assert_allclose(got[0], ref[0], rtol=2e-5)
        np.testing.assert_allclose(got[1], ref[1], rtol=2e-5, atol=1e-7)
        got = fine.u_derivatives(t, x)
        np.testing.assert_allclose(got[0], ref[0], rtol=1e-6)
        np.testing.assert_allclose(got[1], ref[1], rtol=1e-6, atol=1e-8)


def test_gauss_hermite_large_rule_is_finite():
    f = field(mixed_reward(), EmpiricalMeasure.uniform([-0.5, 0.5]), gh_nodes=2048)
    assert np.all(np.isfinite(f.u_derivatives(0.2, np.linspace(-3, 3, 7))))


# -- HJB residual ---------------------------------------------------------------------------


def test_residual_zero_reward_exact():
    f = field(constant_reward(0.0))
    assert np.all(pde_residual(f, 0.5, np.linspace(-1, 1, 5)) == 0.0)


def test_residual_constant_reward():
    f = field(constant_reward(1.0))
    assert np.max(np.abs(pde_residual(f, 0.5, np.linspace(-1, 1, 5)))) <= 1e-12


def test_residual_two_level_example_and_decay():
    f = field(linear_rank_reward())
    r1 = abs(pde_residual(f, 0.5, 0.3, 1e-4))
    r2 = abs(pde_residual(f, 0.5, 0.3, 5e-5))
    assert r1 <= 1e-5
    assert r1 / r2 >= 3.5


def test_residual_domain():
    f = field(linear_rank_reward())
    with pytest.raises(DomainError):
        pde_residual(f, 0.99995, 0.0, 1e-4)
    with pytest.raises(ValueError):
        pde_residual(f, 0.5, 0.0, 0.0)
    # one-sided difference near t = 0
    assert abs(pde_residual(f, 0.0, 0.3, 1e-4)) <= 1e-5


# -- drift tables ----------------------------------------------------------------------------


@pytest.mark.parametrize("t", [0.0, 0.5, 0.99, 0.9999])
def test_drift_table_matches_direct_evaluation(t):
    gen = np.random.default_rng(3)
    mu = EmpiricalMeasure.from_samples(gen.normal(0, 1, 3000))
    f = field(linear_rank_reward(), mu, ModelParams(1.0, 0, 1.0, 1.0))
    tab = build_drift_table(f, t)
    x = np.concatenate([gen.uniform(-4, 4, 500), [-30.0, 30.0]])
    np.testing.assert_allclose(tab(x), f.drift(t, x), atol=1e-7)


def test_drift_table_state_dependent_reward():
    gen = np.random.default_rng(4)
    mu = EmpiricalMeasure.from_samples(gen.normal(0, 1, 200))
    f = field(mixed_reward(), mu, ModelParams(1.0, 0, 1.0, 1.0))
    tab = build_drift_table(f, 0.3)
    x = np.concatenate([gen.uniform(-3, 3, 200), [-40.0, 40.0]])
    np.testing.assert_allclose(tab(x), f.drift(0.3, x), atol=1e-5)
