"""Rank-based mean field games: closed-form value functions, equilibrium
iteration and N-player approximate-Nash checks, with and without common noise."""

__version__ = "0.1.0"

from .errors import (ConsistencyError, DomainError, InsufficientDataError, RankMFGError,
                     UnsupportedMethodError, ValidationError)
from .measure import EmpiricalMeasure, cdf_eval, mixture, second_moment, shift_measure, w1_distance
from .model import (ModelParams, RewardSpec, constant_reward, holder_estimate, linear_rank_reward,
                    mixed_reward, monotonicity_pairing, power_rank_reward, rank_reward, rank_reward_eval,
                    reward_eval, tabulated_reward)
from .value import QuadratureConfig, ValueField, lemma_bounds, pde_residual, u_derivatives, value_and_drift
from .sde import (ConstantControl, OptimalFeedback, ScheduleControl, BoundedFeedback, SimBatch, TimeGrid,
                  make_time_grid, simulate_optimal_terminal, simulate_strategy)
from .fixed_point import (EquilibriumResult, FixedPointConfig, c0_bound, phi_map, solve_equilibrium,
                          uniqueness_certificate)
from .nash import (NashReport, deviation_gap, dkw_bound, mfg_value, nplayer_payoffs, rate_fit, theory_bound,
                   verify_nash)
from .common_noise import (CommonNoiseRun, conditional_fixed_point_check, lift_equilibrium,
                           nplayer_common_noise_gap)
