"""Numerical engine for coupled multi-resource karma economies.

Computes and certifies stationary equilibria of populations bidding
resource-specific karma for priority access to a daily cycle of congestible
public resources, evaluates individual and Nash welfare against the
uncontrolled benchmark, and cross-checks the mean-field predictions with a
finite-population simulation.
"""

from .equilibrium import (
    SolveReport,
    SolverSettings,
    certify_report,
    default_social_state,
    smoothed_policy_update,
    solve_sne,
    stationary_distribution,
)
from .mean_field import (
    FieldQuantities,
    SocialState,
    average_payment,
    bid_distribution,
    compute_field,
    congestion_delay,
    immediate_payoff,
    karma_kernel,
    outcome_probabilities,
    payment_kernel,
    redistribution_kernel,
    state_transition,
)
from .mdp import ValueFunction, best_response_set, expected_rewards, q_values, value_iteration
from .model import (
    EconomyConfig,
    ExchangeMatrix,
    RedistributionRule,
    ResourceSpec,
    StateSpace,
    UserTypeSpec,
    ValidationReport,
    build_state_space,
    load_config,
    max_bid,
    save_config,
    validate_config,
)
from .montecarlo import Population, SimulationStats, run_simulation
from .welfare import (
    BenchmarkDominanceError,
    BenchmarkPayoffs,
    WelfareReport,
    average_payoff,
    benchmark_payoffs,
    nash_welfare,
    welfare_report,
)

__version__ = "0.1.0"
