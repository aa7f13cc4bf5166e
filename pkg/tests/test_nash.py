import json
import math

import numpy as np
import pytest
from scipy import integrate

from rankmfg import InsufficientDataError
from rankmfg.fixed_point import FixedPointConfig, solve_equilibrium
from rankmfg.measure import EmpiricalMeasure
from rankmfg.model import ModelParams, constant_reward, linear_rank_reward
from rankmfg.nash import (TABLE_HEADER, _deviant_ranks, _feedback, _ranks, common_paths, default_family,
                          deviation_gap, dkw_bound, empirical_dkw, mfg_value, nplayer_payoffs, rate_fit, reps_for,
                          theory_bound, verify_nash)
from rankmfg.sde import ConstantControl, make_time_grid, simulate

UNIT = ModelParams(sigma=1.0, sigma0=0.0, cost_c=1.0, horizon_T=1.0)
GRID = make_time_grid(1.0, 40, 2)


@pytest.fixture(scope="module")
def equilibrium():
    cfg = FixedPointConfig(M=20_000, base_steps=40, cluster=2, bootstrap_reps=4)
    return solve_equilibrium(UNIT, linear_rank_reward(), cfg, seed=3).mu_star


# -- DKW and the theory bound -----------------------------------------------------------------


def test_dkw_examples():
    assert dkw_bound(100, 0.1) == pytest.approx(2 * math.exp(-2), rel=1e-15)
    assert round(dkw_bound(100, 0.1), 5) == 0.27067
    assert round(dkw_bound(1000, 0.05), 5) == 0.01348
    assert dkw_bound(3, 1.0) == 2 * math.exp(-6)
    assert dkw_bound(1, 0.01) == 1.0
    with pytest.raises(ValueError):
        dkw_bound(10, 0.0)


def test_theory_bound():
    for N in (1, 16, 256):
        assert theory_bound(N, 2.0, 1.0) == pytest.approx(2.0 * math.sqrt(math.pi / 2) / math.sqrt(N), rel=1e-14)
    assert theory_bound(256, 1.0, 1.0) == pytest.approx(0.0783, abs=5e-5)
    for alpha in (0.25, 0.5, 0.8):
        integral, _ = integrate.quad(lambda y: math.exp(-0.5 * y ** (2 / alpha)), 0, math.inf)
        expected = 2 / (4 * 64) ** (alpha / 2) * integral
        assert theory_bound(64, 1.0, alpha) == pytest.approx(expected, rel=1e-9)
    with pytest.raises(ValueError):
        theory_bound(4, 1.0, 1.5)


def test_empirical_dkw():
    res = empirical_dkw(100, 0.1, 10_000, seed=1)
    assert res.ok and res.bound == dkw_bound(100, 0.1)
    assert 0 < res.fraction <= res.bound
    assert res.lower_confidence <= res.fraction


# -- rate fit ----------------------------------------------------------------------------------


@pytest.mark.parametrize("power", [0.5, 0.25])
def test_rate_fit_exact_power_laws(power):
    Ns = [16, 32, 64, 128, 256, 512, 1024]
    fit = rate_fit([(N, 3.0 * N ** -power) for N in Ns])
    assert abs(fit.slope + power) <= 1e-12
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)


def test_rate_fit_excludes_non_positive():
    fit = rate_fit([(16, 0.25), (64, 0.125), (256, 0.0625), (1024, -0.01)])
    assert fit.excluded == (1024.0,) and fit.used == 3
    assert fit.slope == pytest.approx(-0.5, abs=1e-12)
    with pytest.raises(InsufficientDataError):
        rate_fit([(16, 0.25), (64, 0.0), (256, 0.06)])


# -- ranks -------------------------------------------------------------------------------------


def test_ranks_include_self_and_ties():
    X = np.array([[0.3, -1.0, 0.3, 2.0]])
    assert _ranks(X).tolist() == [[0.75, 0.25, 0.75, 1.0]]
    gen = np.random.default_rng(0)
    R = _ranks(gen.normal(size=(20, 7)))
    assert np.all(R >= 1 / 7)


def test_deviant_ranks_remove_own_equilibrium_state():
    X = np.array([[0.0, 1.0, 2.0, 3.0]])
    who = np.array([[0, 1]])
    # player 0 moves to 2.5: players 1, 2 and itself are at or below -> 3/4
    # player 1 moves to -1: only itself -> 1/4
    assert _deviant_ranks(X, np.array([[2.5, -1.0]]), who).tolist() == [[0.75, 0.25]]
    # staying put reproduces the equilibrium rank
    assert np.array_equal(_deviant_ranks(X, X[:, :2], who), _ranks(X)[:, :2])


# -- payoffs and deviations ------------------------------------------------------------------------


def test_zero_reward_payoff_is_zero():
    J, se = nplayer_payoffs(EmpiricalMeasure.dirac(0), UNIT, constant_reward(0.0), 8, 20, 1, grid=GRID)
    assert J == 0.0 and se == 0.0


def test_single_player_has_rank_one(equilibrium):
    R = linear_rank_reward()
    fb = _feedback(equilibrium, UNIT, R, GRID)
    J, _ = nplayer_payoffs(equilibrium, UNIT, R, 1, 500, 4, feedback=fb)
    effort = simulate(fb, UNIT, GRID, np.arange(500), 4, "nplayer/N1").effort_costs
    assert J == pytest.approx(1.0 - effort.mean(), abs=1e-14)


def test_nplayer_payoff_near_value(equilibrium):
    R = linear_rank_reward()
    fb = _feedback(equilibrium, UNIT, R, GRID)
    V = mfg_value(equilibrium, UNIT, R, 50_000, 2, feedback=fb)
    J, se = nplayer_payoffs(equilibrium, UNIT, R, 256, 200, 5, feedback=fb)
    assert abs(J - V.V) <= theory_bound(256, 1.0, 1.0) + 3 * math.hypot(se, V.stderr)


def test_identity_deviation_is_exactly_zero(equilibrium):
    R = linear_rank_reward()
    fb = _feedback(equilibrium, UNIT, R, GRID)
    res = deviation_gap(equilibrium, UNIT, R, 16, {"a_bar": fb}, 40, 6, feedback=fb)
    assert res.gap == 0.0 and res.stderr == 0.0 and res.argmax == "a_bar"


def test_zero_effort_deviation_does_not_pay(equilibrium):
    R = linear_rank_reward()
    fb = _feedback(equilibrium, UNIT, R, GRID)
    res = deviation_gap(equilibrium, UNIT, R, 64, {"zero": ConstantControl(0.0, "zero")}, 400, 7, feedback=fb)
    assert res.gap <= 3 * res.stderr
    assert res.gap < 0


def test_default_family():
    fb = _feedback(EmpiricalMeasure.dirac(0), UNIT, linear_rank_reward(), GRID)
    fam = default_family(fb)
    assert len(fam) == 11 and fam["a_bar"] is fb
    assert {"zero", "const(+0.5)", "const(-1)", "1.5*a_bar", "a_bar(0.8t)"} <= set(fam)


# -- the value ------------------------------------------------------------------------------------


def test_value_of_constant_rewards():
    for value in (0.0, 1.0):
        est = mfg_value(EmpiricalMeasure.dirac(0), UNIT, constant_reward(value), 1000, 1, grid=GRID)
        assert est.analytic == value and est.V == value and est.consistent


def test_value_estimators_agree(equilibrium):
    est = mfg_value(equilibrium, UNIT, linear_rank_reward(), 100_000, 8, grid=GRID)
    assert est.consistent
    assert abs(est.V - est.analytic) <= 3 * est.stderr


# -- the ladder -----------------------------------------------------------------------------------


def test_reps_for():
    assert reps_for(16, 1.0, 1.0) == 8192
    assert reps_for(1024, 1.0, 1.0) == 128
    assert reps_for(1 << 20, 1.0, 1.0) == 64


def test_common_paths_are_scaled_brownian():
    sh = common_paths(1, "common", make_time_grid(1.0, 20, 1), 20_000, 0.5)
    assert np.all(sh.path[0] == 0)
    assert abs(sh.terminal.std() - 0.5) < 0.02
    again = common_paths(1, "common", make_time_grid(1.0, 20, 1), 10, 0.5)
    assert np.array_equal(again.path, sh.path[:, :10])


def test_verify_nash_small_ladder(equilibrium, tmp_path):
    rep = verify_nash(equilibrium, UNIT, linear_rank_reward(), 9, N_values=(4, 8, 16), reps=64, grid=GRID,
                      value_paths=20_000)
    assert rep.N_values == [4, 8, 16]
    for row in rep.rows:
        assert row.stderr > 0 and row.gap_stderr >= 0
        assert row.theory_bound == theory_bound(row.N, 1.0, 1.0)
        assert row.abs_diff == abs(row.J_N - rep.V)
    table, summary = rep.save(tmp_path)
    lines = table.read_text().splitlines()
    assert lines[0] == ",".join(TABLE_HEADER) and len(lines) == 4
    data = json.loads(summary.read_text())
    assert data["reps"] == {"4": 64, "8": 64, "16": 64}
    # the same seed reproduces the table exactly
    again = verify_nash(equilibrium, UNIT, linear_rank_reward(), 9, N_values=(4, 8, 16), reps=64, grid=GRID,
                        value_paths=20_000, threads=3)
    assert again.payoff_table() == rep.payoff_table()
