"""Finite-population simulation of the karma protocol.

Serves as an independent oracle for the mean-field quantities: N agents
follow a supplied policy through the daily resource cycle with sampled bids,
exact top-k priority rationing (uniform random tie-breaking at the marginal
bid), integer karma payments with sampled rounding of cross-account debits,
and integer redistribution that re-offers capped surplus to unsaturated
eligible users so the karma stock is exactly conserved whenever nothing is
lost to saturation.

The mean-field epsilon under-allocation is a continuity device and is not
applied here; all statistics come with batch-mean standard errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .mean_field import SocialState
from .model import RedistributionRule, StateSpace


class PolicyFeasibilityError(RuntimeError):
    """The supplied policy puts mass on bids above the exchange-weighted
    balance; agents cannot follow it."""


@dataclass(eq=False)
class Population:
    """Agent-level state of the simulated economy."""

    type_index: np.ndarray  # (N,)
    urgency: np.ndarray  # (N,) urgency level indices
    karma: np.ndarray  # (N, n_r) integer accounts
    day: int
    seed: int


@dataclass(eq=False)
class SimulationStats:
    """Aggregated empirical statistics with batch-mean standard errors."""

    seed: int
    n_agents: int
    n_days: int
    warmup_days: int
    bid_freq: np.ndarray  # (n_r, n_bid_cols)
    bid_freq_se: np.ndarray
    delay: np.ndarray  # (n_r,)
    delay_se: np.ndarray
    payoff_endogenous: np.ndarray  # (n_types,)
    payoff_endogenous_se: np.ndarray
    payoff_exogenous: np.ndarray
    payoff_exogenous_se: np.ndarray
    priority_grants_max: np.ndarray  # (n_r,) largest daily grant count
    priority_cap: np.ndarray  # (n_r,) floor(s_pr * N)
    saturation_events: int
    karma_lost: int
    conservation_violations: int
    karma_account_mean: np.ndarray  # (n_r,) time-average per-agent account
    daily_rows: list = dataclass_field(default_factory=list)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "n_agents": self.n_agents,
            "n_days": self.n_days,
            "warmup_days": self.warmup_days,
            "delay": self.delay.tolist(),
            "delay_se": self.delay_se.tolist(),
            "payoff_endogenous": self.payoff_endogenous.tolist(),
            "payoff_endogenous_se": self.payoff_endogenous_se.tolist(),
            "payoff_exogenous": self.payoff_exogenous.tolist(),
            "payoff_exogenous_se": self.payoff_exogenous_se.tolist(),
            "priority_grants_max": self.priority_grants_max.tolist(),
            "priority_cap": self.priority_cap.tolist(),
            "saturation_events": self.saturation_events,
            "karma_lost": self.karma_lost,
            "conservation_violations": self.conservation_violations,
            "karma_account_mean": self.karma_account_mean.tolist(),
        }


def init_population(space: StateSpace, n_agents: int, seed: int) -> Population:
    """Agents at the first resource with endowment karma and urgency sampled
    from the chain's stationary conditional (the mean-field start)."""
    from .model import stationary_urgency_conditionals

    cfg = space.cfg
    rng = np.random.default_rng(seed)
    shares = cfg.type_shares
    counts = np.floor(shares * n_agents).astype(int)
    while counts.sum() < n_agents:
        counts[int(np.argmax(shares * n_agents - counts))] += 1
    type_index = np.repeat(np.arange(cfg.n_types), counts)
    cond = stationary_urgency_conditionals(cfg)
    urgency = np.empty(n_agents, dtype=np.int64)
    for t in range(cfg.n_types):
        mask = type_index == t
        urgency[mask] = rng.choice(cfg.n_urgencies, size=mask.sum(), p=cond[t, 0])
    karma = np.tile(
        np.array([res.karma_mean for res in cfg.resources], dtype=np.int64),
        (n_agents, 1),
    )
    return Population(
        type_index=type_index, urgency=urgency, karma=karma, day=0, seed=seed
    )


def _policy_cdf(space: StateSpace, policy: np.ndarray) -> np.ndarray:
    if np.any(policy * ~space.feasible[None, :, None] > 1e-15):
        raise PolicyFeasibilityError("policy puts mass on infeasible bids")
    return np.cumsum(policy, axis=-1)


def _batch_se(values: np.ndarray, n_batches: int = 40) -> np.ndarray:
    """Standard error of the mean of a (days, ...) series via batch means,
    robust to day-to-day correlation."""
    days = values.shape[0]
    b = max(min(n_batches, days // 2), 1)
    edge = (days // b) * b
    batches = values[:edge].reshape(b, days // b, *values.shape[1:]).mean(axis=1)
    if b == 1:
        return np.zeros(values.shape[1:])
    return batches.std(axis=0, ddof=1) / np.sqrt(b)


def _ratio_se(num: np.ndarray, den: np.ndarray, n_batches: int = 40) -> np.ndarray:
    """Batch-mean standard error for a ratio of daily sums."""
    days = num.shape[0]
    b = max(min(n_batches, days // 2), 1)
    edge = (days // b) * b
    shape = (b, days // b) + num.shape[1:]
    num_b = num[:edge].reshape(shape).sum(axis=1)
    den_b = den[:edge].reshape(shape).sum(axis=1)
    ratios = num_b / np.maximum(den_b, 1e-300)
    if b == 1:
        return np.zeros(num.shape[1:])
    return ratios.std(axis=0, ddof=1) / np.sqrt(b)


def run_simulation(
    space: StateSpace,
    policy: np.ndarray | SocialState,
    n_agents: int,
    n_days: int,
    seed: int = 0,
    warmup_days: int | None = None,
    collect_daily: bool = False,
) -> SimulationStats:
    """Simulate N agents for the given number of days under a fixed policy.

    Statistics exclude the warm-up period (default min(n_days // 5, 1000))
    during which the population relaxes from the endowment start toward its
    stationary behaviour.
    """
    cfg = space.cfg
    if isinstance(policy, SocialState):
        policy = policy.policy
    if warmup_days is None:
        warmup_days = min(n_days // 5, 1000)
    if warmup_days >= n_days:
        raise ValueError("warm-up must leave at least one counted day")

    rng = np.random.default_rng(seed)
    pop = init_population(space, n_agents, seed)
    cdf = _policy_cdf(space, policy)  # (n_types, n_r, n_u, n_K, n_bc)
    ustep_cdf = np.cumsum(space.urgency_step, axis=-1)

    n_r = space.n_resources
    n_types = cfg.n_types
    n_bc = space.n_bid_cols
    chi = cfg.exchange.chi
    kmax = np.array([res.karma_max for res in cfg.resources], dtype=np.int64)
    prio_cap = np.array(
        [int(np.floor(res.priority_capacity * n_agents)) for res in cfg.resources]
    )
    regime = cfg.exchange.regime()
    strict_conservation = regime in ("no_exchange", "unit")

    counted = n_days - warmup_days
    bid_counts = np.zeros((counted, n_r, n_bc))
    delays = np.zeros((counted, n_r))
    payoff_sum = np.zeros((counted, n_types))
    step_count = np.zeros((counted, n_types))
    active_payoff_sum = np.zeros((counted, n_types))
    active_count = np.zeros((counted, n_types))
    karma_mean_acc = np.zeros(n_r)
    grants_max = np.zeros(n_r, dtype=np.int64)
    saturation_events = 0
    karma_lost = 0
    conservation_violations = 0
    daily_rows: list = []

    type_counts = np.bincount(pop.type_index, minlength=n_types)
    u_values = space.urgency_values

    for day in range(n_days):
        rec = day - warmup_days
        for r in range(n_r):
            # Sample bids from the policy rows of each agent's current state.
            k_idx = pop.karma @ space.karma_strides
            rows = cdf[pop.type_index, r, pop.urgency, k_idx]
            cols = (rows < rng.random((n_agents, 1))).sum(axis=1)
            if np.any(cols >= 1):
                if np.any(cols - 1 > space.bid_cap[r, k_idx]):
                    raise PolicyFeasibilityError(
                        "sampled a bid above the exchange-weighted balance"
                    )
            active = cols >= 1
            bids = np.where(active, cols - 1, -1)
            karma_before = int(pop.karma.sum())

            # Exact top-k rationing with uniform tie-breaking.
            active_idx = np.flatnonzero(active)
            n_active = active_idx.size
            n_win = min(prio_cap[r], n_active)
            if n_win > 0:
                keys = bids[active_idx] + rng.random(n_active)
                order = np.argsort(-keys)
                winners = active_idx[order[:n_win]]
            else:
                winners = np.empty(0, dtype=np.int64)
            grants_max[r] = max(grants_max[r], n_win)

            # Payments: own account first, then the others cyclically at the
            # exchange rates, final fractional debit sampled floor/ceil.
            total_collected = int(bids[winners].sum()) if n_win else 0
            if n_win:
                remaining = bids[winners].astype(float)
                own = np.minimum(remaining, pop.karma[winners, r])
                pop.karma[winners, r] -= own.astype(np.int64)
                remaining -= own
                for j in range(1, n_r):
                    acct = (r + j) % n_r
                    rate = chi[r, acct]
                    if rate <= 0.0:
                        continue
                    need = remaining > 1e-9
                    if not np.any(need):
                        break
                    bal = pop.karma[winners, acct].astype(float)
                    exact = np.minimum(remaining / rate, bal)
                    lo = np.floor(exact + 1e-9)
                    frac = np.clip(exact - lo, 0.0, 1.0)
                    frac[frac < 1e-9] = 0.0
                    debit = lo + (rng.random(n_win) < frac)
                    debit = np.where(need, debit, 0.0)
                    pop.karma[winners, acct] -= debit.astype(np.int64)
                    covered = remaining <= bal * rate + 1e-9
                    remaining = np.where(
                        need, np.where(covered, 0.0, remaining - bal * rate), remaining
                    )
                if np.any(remaining > 1e-6):
                    raise AssertionError("winner could not cover its bid")

            # Redistribution in integer units with surplus re-offering.
            lost_step = 0
            if cfg.redistribution is RedistributionRule.TO_ALL:
                eligible = np.arange(n_agents)
            else:
                eligible = active_idx
            if total_collected > 0 and eligible.size > 0:
                base, rem = divmod(total_collected, eligible.size)
                if base:
                    pop.karma[eligible, r] += base
                if rem:
                    lucky = rng.choice(eligible, size=rem, replace=False)
                    pop.karma[lucky, r] += 1
                over = pop.karma[eligible, r] - kmax[r]
                surplus = int(over[over > 0].sum())
                if surplus > 0:
                    saturation_events += 1
                    np.minimum(pop.karma[:, r], kmax[r], out=pop.karma[:, r])
                    while surplus > 0:
                        unsat = eligible[pop.karma[eligible, r] < kmax[r]]
                        if unsat.size == 0:
                            lost_step += surplus
                            break
                        give = min(surplus, unsat.size)
                        sel = rng.choice(unsat, size=give, replace=False)
                        pop.karma[sel, r] += 1
                        surplus -= give
            karma_lost += lost_step

            if strict_conservation:
                delta = int(pop.karma.sum()) - karma_before
                if delta != -lost_step:
                    conservation_violations += 1

            # Outcomes, delay, payoffs.
            outcome_gp = active.copy()
            outcome_gp[winners] = False
            gp_share = outcome_gp.sum() / n_agents
            res = cfg.resources[r]
            t_d = max((gp_share - res.gp_capacity) / res.gp_capacity, 0.0)
            u_val = u_values[pop.urgency]
            payoff = np.zeros(n_agents)
            payoff[active] = np.where(
                u_val[active] > 0, u_val[active] * cfg.nominal_payoff, 0.0
            )
            payoff[outcome_gp] -= np.where(
                u_val[outcome_gp] > 0, u_val[outcome_gp] * t_d, t_d
            )

            if rec >= 0:
                bid_counts[rec, r] = np.bincount(cols, minlength=n_bc) / n_agents
                delays[rec, r] = t_d
                payoff_sum[rec] += np.bincount(
                    pop.type_index, weights=payoff, minlength=n_types
                )
                step_count[rec] += type_counts
                active_payoff_sum[rec] += np.bincount(
                    pop.type_index[active], weights=payoff[active], minlength=n_types
                )
                active_count[rec] += np.bincount(
                    pop.type_index[active], minlength=n_types
                )
                karma_mean_acc += pop.karma.mean(axis=0) / n_r
                if collect_daily:
                    daily_rows.append(
                        {
                            "day": day,
                            "resource": cfg.resources[r].name,
                            "active": int(n_active),
                            "priority_grants": int(n_win),
                            "gp_share": float(gp_share),
                            "delay": float(t_d),
                            "collected": total_collected,
                            "karma_lost": lost_step,
                            "karma_total": int(pop.karma.sum()),
                        }
                    )

            # Exogenous resource-urgency step.
            urows = ustep_cdf[pop.type_index, r, pop.urgency]
            pop.urgency = (urows < rng.random((n_agents, 1))).sum(axis=1)

        pop.day += 1
        if np.any(pop.karma < 0) or np.any(pop.karma > kmax[None, :]):
            raise AssertionError("karma account left its bounds")

    payoff_en = payoff_sum.sum(axis=0) / step_count.sum(axis=0)
    payoff_ex = active_payoff_sum.sum(axis=0) / np.maximum(active_count.sum(axis=0), 1)
    return SimulationStats(
        seed=seed,
        n_agents=n_agents,
        n_days=n_days,
        warmup_days=warmup_days,
        bid_freq=bid_counts.mean(axis=0),
        bid_freq_se=_batch_se(bid_counts),
        delay=delays.mean(axis=0),
        delay_se=_batch_se(delays),
        payoff_endogenous=payoff_en,
        payoff_endogenous_se=_ratio_se(payoff_sum, step_count),
        payoff_exogenous=payoff_ex,
        payoff_exogenous_se=_ratio_se(active_payoff_sum, np.maximum(active_count, 1e-12)),
        priority_grants_max=grants_max,
        priority_cap=prio_cap,
        saturation_events=saturation_events,
        karma_lost=karma_lost,
        conservation_violations=conservation_violations,
        karma_account_mean=karma_mean_acc / max(counted, 1),
        daily_rows=daily_rows,
    )
