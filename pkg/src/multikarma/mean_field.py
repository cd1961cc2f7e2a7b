"""Population-level quantities induced by a social state.

Given the social state (per-type state distributions plus bidding policy),
this module derives everything a single user's decision problem needs: the
population bid distribution per resource, the probability of winning priority
access at each bid, the congestion delay of general-purpose access, the karma
collected and redistributed, and the full karma transition kernel combining
payment and redistribution.

Fractional karma amounts never enter accounts: every fractional payment or
redistribution share becomes a two-point floor/ceil distribution whose
expectation equals the exact amount.  Accounts cap at karma_max; the expected
mass capped away is recycled uniformly to users that cannot saturate, in one
correction pass (the residual second-order loss is reported, not recycled).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import EconomyConfig, RedistributionRule, StateSpace

OUTCOME_PR = 0
OUTCOME_GP = 1
OUTCOME_OUT = 2

_INT_SNAP = 1e-9


@dataclass(eq=False)
class SocialState:
    """Distribution-policy pair the equilibrium solver fixes.

    dist[t, r, u, K]: share of type-t users in private state (u, K) when the
    population competes at resource r; sums to 1 over (u, K) for each (t, r).
    policy[t, r, u, K, c]: bid distribution over action columns (column 0 is
    stay-out, column b + 1 is the integer bid b); zero on infeasible bids.
    """

    dist: np.ndarray
    policy: np.ndarray

    def copy(self) -> "SocialState":
        return SocialState(self.dist.copy(), self.policy.copy())


def validate_social_state(space: StateSpace, social: SocialState) -> list[str]:
    """Return violated social-state invariants (empty list when valid)."""
    bad: list[str] = []
    cfg = space.cfg
    d, pi = social.dist, social.policy
    if d.shape != (cfg.n_types, space.n_resources, space.n_urgencies, space.n_karma):
        return [f"dist has shape {d.shape}"]
    if pi.shape != d.shape + (space.n_bid_cols,):
        return [f"policy has shape {pi.shape}"]
    if np.any(d < 0) or np.any(pi < 0):
        bad.append("distributions must be nonnegative")
    sums = d.sum(axis=(2, 3))
    if np.any(np.abs(sums - 1.0) > 1e-9):
        bad.append("dist must sum to 1 over private states per (type, resource)")
    psums = pi.sum(axis=4)
    if np.any(np.abs(psums - 1.0) > 1e-9):
        bad.append("policy rows must sum to 1")
    infeasible = ~space.feasible[None, :, None, :, :]
    if np.any(pi * infeasible > 0):
        bad.append("policy places mass on infeasible bids")
    return bad


@dataclass
class RedistributionPlan:
    """Per-resource redistribution parameters for one social state.

    Eligible users gain ``base_gain`` (plus ``extra`` if their post-payment
    account cannot exceed karma_max under the nominal gain), rounded to a
    two-point integer distribution and capped at karma_max.
    """

    rule: RedistributionRule
    karma_max: int
    base_gain: float
    extra: float
    nonsat_threshold: int
    surplus: float
    nonsat_mass: float
    lost: float


@dataclass(eq=False)
class FieldQuantities:
    """All social-state-dependent quantities, per resource."""

    bid_dist: np.ndarray  # (n_r, n_bid_cols), column 0 = stay-out share
    outcome_probs: np.ndarray  # (n_r, 3, n_bid_cols)
    delay: np.ndarray  # (n_r,)
    avg_payment: np.ndarray  # (n_r,)
    active_payment: np.ndarray  # (n_r,)
    no_active: np.ndarray  # (n_r,) bool: nobody bids, active payment undefined
    plans: tuple[RedistributionPlan, ...]


def bid_distribution(space: StateSpace, social: SocialState) -> np.ndarray:
    """Population share bidding each amount per resource (type-share weighted)."""
    g = space.cfg.type_shares
    return np.einsum("t,truk,trukc->rc", g, social.dist, social.policy)


def outcome_probabilities(
    nu_r: np.ndarray, priority_capacity: float, epsilon: float
) -> np.ndarray:
    """Outcome probabilities (priority, general purpose, out) per action column.

    A bid wins priority surely when all strictly-higher bids plus its own
    level fit under the (epsilon-under-allocated) priority capacity, never
    when the higher bids alone exhaust it, and at the rationing ratio in
    between; the three branches collapse to a clip of the ratio.  Stay-out
    users take outcome "out" surely.
    """
    v = nu_r[1:]
    tail = np.flip(np.cumsum(np.flip(v))) - v
    prio = np.clip((priority_capacity - tail) / (epsilon + v), 0.0, 1.0)
    psi = np.zeros((3, nu_r.shape[0]))
    psi[OUTCOME_PR, 1:] = prio
    psi[OUTCOME_GP, 1:] = 1.0 - prio
    psi[OUTCOME_OUT, 0] = 1.0
    return psi


def congestion_delay(nu_r: np.ndarray, psi_r: np.ndarray, gp_capacity: float) -> float:
    """Delay from general-purpose excess demand (stay-out users add none)."""
    demand = float(np.dot(nu_r[1:], psi_r[OUTCOME_GP, 1:]))
    return max((demand - gp_capacity) / gp_capacity, 0.0)


def immediate_payoff(
    urgency: float,
    bid: int | None,
    psi_r: np.ndarray,
    delay: float,
    nominal_payoff: float,
) -> float:
    """Per-step payoff: nothing when staying out; urgency-weighted nominal
    payoff minus expected delay when needed; pure expected delay cost when
    consuming without need."""
    if bid is None:
        return 0.0
    expected_delay = psi_r[OUTCOME_GP, bid + 1] * delay
    if urgency > 0:
        return urgency * (nominal_payoff - expected_delay)
    return -expected_delay


def payoff_table(space: StateSpace, field: FieldQuantities) -> np.ndarray:
    """Immediate payoffs for every (resource, urgency, action column)."""
    cfg = space.cfg
    u_vals = space.urgency_values
    table = np.zeros((space.n_resources, space.n_urgencies, space.n_bid_cols))
    for r in range(space.n_resources):
        exp_delay = field.outcome_probs[r, OUTCOME_GP, 1:] * field.delay[r]
        for ui, u in enumerate(u_vals):
            if u > 0:
                table[r, ui, 1:] = u * (cfg.nominal_payoff - exp_delay)
            else:
                table[r, ui, 1:] = -exp_delay
    return table


def average_payment(nu_r: np.ndarray, psi_r: np.ndarray) -> float:
    """Expected karma collected per capita at a resource."""
    bids = np.arange(nu_r.shape[0] - 1, dtype=float)
    return float(np.dot(nu_r[1:] * psi_r[OUTCOME_PR, 1:], bids))


def active_payment(nu_r: np.ndarray, p_bar: float) -> tuple[float, bool]:
    """Per-active-user share of collections; (0, True) when nobody is active
    (no payments are collected either)."""
    active = 1.0 - nu_r[0]
    if active <= 1e-15:
        return 0.0, True
    return p_bar / active, False


def _round_pair(amount: float) -> tuple[int, int, float]:
    """Two-point integer rounding of a nonnegative amount: returns
    (floor, ceil, probability of ceil); expectation equals the amount."""
    lo = int(np.floor(amount + _INT_SNAP))
    frac = amount - lo
    if frac < _INT_SNAP:
        return lo, lo, 0.0
    return lo, lo + 1, frac


def post_payment_account_marginals(
    space: StateSpace, social: SocialState, psi_pr: np.ndarray, r: int
) -> tuple[np.ndarray, np.ndarray]:
    """Population mass over the post-payment resource-r account.

    Returns (mass_all, mass_active); mass_all sums to 1, mass_active to the
    active share.  These marginals drive the saturation correction of the
    redistribution step.
    """
    g = space.cfg.type_shares
    n_kr = int(space.karma_sizes[r])
    own = space.karma_grid[:, r]
    w = np.einsum("t,tuk,tukc->kc", g, social.dist[:, r], social.policy[:, r])

    dst, prob = space.payment_maps(r)
    n_bids = space.n_bid_cols - 1
    khat = space.karma_grid[dst.reshape(-1, 2), r].reshape(n_bids, -1, 2)
    wpr = (w.T[1:] * psi_pr[:, None])[:, :, None] * prob
    mass_active = np.bincount(khat.reshape(-1), weights=wpr.reshape(-1), minlength=n_kr)
    wgp = w.T[1:] * (1.0 - psi_pr)[:, None]
    mass_active += np.bincount(
        np.broadcast_to(own, wgp.shape).reshape(-1),
        weights=wgp.reshape(-1),
        minlength=n_kr,
    )
    mass_all = mass_active + np.bincount(own, weights=w[:, 0], minlength=n_kr)
    return mass_all, mass_active


def build_redistribution_plan(
    space: StateSpace,
    social: SocialState,
    nu_r: np.ndarray,
    psi_r: np.ndarray,
    r: int,
) -> RedistributionPlan:
    """Derive the redistribution parameters for resource r, including the
    one-pass saturation correction against the current distribution."""
    cfg = space.cfg
    rule = cfg.redistribution
    kmax = cfg.resources[r].karma_max
    p_bar = average_payment(nu_r, psi_r)
    if rule is RedistributionRule.TO_ALL:
        base = p_bar
        mass, _ = post_payment_account_marginals(space, social, psi_r[OUTCOME_PR, 1:], r)
    else:
        base, _ = active_payment(nu_r, p_bar)
        _, mass = post_payment_account_marginals(space, social, psi_r[OUTCOME_PR, 1:], r)

    lo, hi, p_hi = _round_pair(base)
    ceil_gain = hi if p_hi > 0.0 else lo
    threshold = kmax - ceil_gain
    accounts = np.arange(kmax + 1)
    surplus_per = (1.0 - p_hi) * np.maximum(accounts + lo - kmax, 0) + p_hi * np.maximum(
        accounts + hi - kmax, 0
    )
    surplus = float(np.dot(mass, surplus_per))
    nonsat = accounts <= threshold
    nonsat_mass = float(mass[nonsat].sum())

    extra = 0.0
    lost = 0.0
    if surplus > 0.0:
        if nonsat_mass > 1e-15:
            extra = surplus / nonsat_mass
            lo2, hi2, p2 = _round_pair(base + extra)
            lost_per = (1.0 - p2) * np.maximum(accounts + lo2 - kmax, 0) + p2 * np.maximum(
                accounts + hi2 - kmax, 0
            )
            lost = float(np.dot(mass[nonsat], lost_per[nonsat]))
        else:
            lost = surplus

    return RedistributionPlan(
        rule=rule,
        karma_max=kmax,
        base_gain=base,
        extra=extra,
        nonsat_threshold=threshold,
        surplus=surplus,
        nonsat_mass=nonsat_mass,
        lost=lost,
    )


def redistribution_account_map(plan: RedistributionPlan) -> tuple[np.ndarray, np.ndarray]:
    """Post-redistribution account transition for eligible users.

    Returns (dst, prob) of shape (karma_max + 1, 2) over the single affected
    account: the gained amount rounded to two points and capped at karma_max.
    """
    kmax = plan.karma_max
    accounts = np.arange(kmax + 1)
    dst = np.zeros((kmax + 1, 2), dtype=np.int64)
    prob = np.zeros((kmax + 1, 2))

    lo, hi, p_hi = _round_pair(plan.base_gain)
    lo2, hi2, p2 = _round_pair(plan.base_gain + plan.extra)
    boosted = accounts <= plan.nonsat_threshold
    dst[:, 0] = np.minimum(accounts + np.where(boosted, lo2, lo), kmax)
    dst[:, 1] = np.minimum(accounts + np.where(boosted, hi2, hi), kmax)
    prob[:, 0] = np.where(boosted, 1.0 - p2, 1.0 - p_hi)
    prob[:, 1] = np.where(boosted, p2, p_hi)
    return dst, prob


def karma_transition_tables(
    space: StateSpace, field: FieldQuantities
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Outcome-averaged karma kernel per (resource, action column).

    For each resource returns (dst, prob) of shape (n_bid_cols, n_karma, 6):
    up to six destination karma indices per state and action, mixing the
    priority branch (payment then redistribution) and the general-purpose /
    stay-out branches (redistribution only) at the outcome probabilities.
    Rows of feasible actions sum to 1.
    """
    tables = []
    rule = space.cfg.redistribution
    for r in range(space.n_resources):
        plan = field.plans[r]
        psi = field.outcome_probs[r]
        stride = space.karma_strides[r]
        own = space.karma_grid[:, r]
        n_k = space.n_karma
        n_bids = space.n_bid_cols - 1

        rd_dst, rd_prob = redistribution_account_map(plan)
        # Destination shift of the redistribution step applied at account
        # value a: delta[a, j] in karma-index units.
        delta = (rd_dst - np.arange(plan.karma_max + 1)[:, None]) * stride

        dst = np.zeros((space.n_bid_cols, n_k, 6), dtype=np.int64)
        prob = np.zeros((space.n_bid_cols, n_k, 6))

        # Stay-out: redistribution only under to-all, identity under to-active.
        if rule is RedistributionRule.TO_ALL:
            dst[0, :, :2] = np.arange(n_k)[:, None] + delta[own]
            prob[0, :, :2] = rd_prob[own]
        else:
            dst[0, :, 0] = np.arange(n_k)
            prob[0, :, 0] = 1.0

        pay_dst, pay_prob = space.payment_maps(r)  # (n_bids, n_k, 2)
        khat = space.karma_grid[pay_dst.reshape(-1, 2), r].reshape(n_bids, n_k, 2)
        pr_w = psi[OUTCOME_PR, 1:]
        gp_w = psi[OUTCOME_GP, 1:]
        # Priority branch: payment point i then redistribution point j.
        pr_dst = pay_dst[:, :, :, None] + delta[khat]
        pr_prob = (pay_prob[:, :, :, None] * rd_prob[khat]) * pr_w[:, None, None, None]
        dst[1:, :, :4] = pr_dst.reshape(n_bids, n_k, 4)
        prob[1:, :, :4] = pr_prob.reshape(n_bids, n_k, 4)
        # General-purpose branch: no payment, redistribution at own account.
        feas = np.arange(n_bids)[:, None] <= space.bid_cap[r][None, :]
        dst[1:, :, 4:] = np.arange(n_k)[None, :, None] + delta[own][None]
        prob[1:, :, 4:] = rd_prob[own][None] * gp_w[:, None, None] * feas[:, :, None]

        tables.append((dst, prob))
    return tables


def compute_field(space: StateSpace, social: SocialState) -> FieldQuantities:
    """Evaluate every field quantity for a social state."""
    cfg = space.cfg
    n_r = space.n_resources
    nu = bid_distribution(space, social)
    psi = np.zeros((n_r, 3, space.n_bid_cols))
    delay = np.zeros(n_r)
    p_bar = np.zeros(n_r)
    p_act = np.zeros(n_r)
    no_active = np.zeros(n_r, dtype=bool)
    plans = []
    for r, res in enumerate(cfg.resources):
        psi[r] = outcome_probabilities(nu[r], res.priority_capacity, cfg.epsilon)
        delay[r] = congestion_delay(nu[r], psi[r], res.gp_capacity)
        p_bar[r] = average_payment(nu[r], psi[r])
        p_act[r], no_active[r] = active_payment(nu[r], p_bar[r])
        plans.append(build_redistribution_plan(space, social, nu[r], psi[r], r))
    return FieldQuantities(
        bid_dist=nu,
        outcome_probs=psi,
        delay=delay,
        avg_payment=p_bar,
        active_payment=p_act,
        no_active=no_active,
        plans=tuple(plans),
    )


# -- single-state kernels (reference entry points) ---------------------------


def _merge_points(points: list[tuple[int, float]]) -> list[tuple[int, float]]:
    acc: dict[int, float] = {}
    for idx, p in points:
        if p > 0.0:
            acc[idx] = acc.get(idx, 0.0) + p
    return sorted(acc.items())


def payment_kernel(
    space: StateSpace, r: int, karma: np.ndarray, bid: int | None, outcome: int
) -> list[tuple[np.ndarray, float]]:
    """Distribution over post-payment karma vectors for one user.

    Only priority winners pay; the bid is debited from the contested account
    first, overflow from the other accounts at the exchange rates, with the
    final fractional debit rounded probabilistically.
    """
    k_idx = space.karma_index(karma)
    if bid is None or outcome != OUTCOME_PR:
        return [(space.karma_grid[k_idx].copy(), 1.0)]
    if bid > space.bid_cap[r, k_idx]:
        raise AssertionError("bid exceeds the exchange-weighted balance")
    dst, prob = space.payment_maps(r)
    pts = _merge_points(
        [(int(dst[bid, k_idx, j]), float(prob[bid, k_idx, j])) for j in range(2)]
    )
    return [(space.karma_grid[i].copy(), p) for i, p in pts]


def redistribution_kernel(
    space: StateSpace,
    r: int,
    karma_hat: np.ndarray,
    outcome: int,
    plan: RedistributionPlan,
) -> list[tuple[np.ndarray, float]]:
    """Distribution over post-redistribution karma vectors for one user."""
    k_idx = space.karma_index(karma_hat)
    eligible = plan.rule is RedistributionRule.TO_ALL or outcome != OUTCOME_OUT
    if not eligible:
        return [(space.karma_grid[k_idx].copy(), 1.0)]
    rd_dst, rd_prob = redistribution_account_map(plan)
    own = int(karma_hat[r])
    stride = space.karma_strides[r]
    pts = _merge_points(
        [
            (k_idx + int(rd_dst[own, j] - own) * stride, float(rd_prob[own, j]))
            for j in range(2)
        ]
    )
    return [(space.karma_grid[i].copy(), p) for i, p in pts]


def karma_kernel(
    space: StateSpace,
    r: int,
    karma: np.ndarray,
    bid: int | None,
    outcome: int,
    plan: RedistributionPlan,
) -> list[tuple[np.ndarray, float]]:
    """Payment composed with redistribution for one (state, bid, outcome)."""
    acc: dict[int, float] = {}
    for khat, p1 in payment_kernel(space, r, karma, bid, outcome):
        for kplus, p2 in redistribution_kernel(space, r, khat, outcome, plan):
            idx = space.karma_index(kplus)
            acc[idx] = acc.get(idx, 0.0) + p1 * p2
    return [(space.karma_grid[i].copy(), p) for i, p in sorted(acc.items())]


def state_transition(
    space: StateSpace,
    type_index: int,
    r: int,
    u: int,
    karma: np.ndarray,
    bid: int | None,
    field: FieldQuantities,
) -> list[tuple[tuple[int, int, np.ndarray], float]]:
    """Full one-step state transition for one user: the exogenous
    resource-urgency move times the outcome-averaged karma kernel."""
    r_next = (r + 1) % space.n_resources
    psi = field.outcome_probs[r]
    col = 0 if bid is None else bid + 1
    plan = field.plans[r]
    karma_pts: dict[int, float] = {}
    for o in (OUTCOME_PR, OUTCOME_GP, OUTCOME_OUT):
        w = psi[o, col]
        if w <= 0.0:
            continue
        for kplus, p in karma_kernel(space, r, karma, bid, o, plan):
            idx = space.karma_index(kplus)
            karma_pts[idx] = karma_pts.get(idx, 0.0) + w * p
    out = []
    mix = space.urgency_step[type_index, r, u]
    for u_next, pu in enumerate(mix):
        if pu <= 0.0:
            continue
        for idx, pk in sorted(karma_pts.items()):
            out.append(((r_next, u_next, space.karma_grid[idx].copy()), pu * pk))
    return out
