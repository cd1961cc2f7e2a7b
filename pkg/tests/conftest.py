"""Shared fixtures: small random economies and naive reference kernels.

The naive implementations here are deliberately independent of the library's
vectorised code paths (pure-Python loops over explicit cases) so they can
serve as oracles for the kernel and transition tests.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from multikarma.mean_field import (
    OUTCOME_GP,
    OUTCOME_OUT,
    OUTCOME_PR,
    RedistributionPlan,
    SocialState,
)
from multikarma.model import (
    EconomyConfig,
    ExchangeMatrix,
    RedistributionRule,
    ResourceSpec,
    StateSpace,
    UserTypeSpec,
    validate_config,
)


def block_chain(rng: np.random.Generator, n_r: int, n_u: int) -> np.ndarray:
    """Random row-stochastic chain with the resource-cycle block structure."""
    n = n_r * n_u
    chain = np.zeros((n, n))
    for r in range(n_r):
        r_next = (r + 1) % n_r
        block = rng.random((n_u, n_u)) + 0.05
        block /= block.sum(axis=1, keepdims=True)
        chain[r * n_u : (r + 1) * n_u, r_next * n_u : (r_next + 1) * n_u] = block
    return chain


def random_economy(
    rng: np.random.Generator,
    n_r: int | None = None,
    n_u: int | None = None,
    n_types: int | None = None,
    max_karma: int = 3,
    redistribution: RedistributionRule | None = None,
) -> EconomyConfig:
    """A small valid economy with randomised capacities, chains and rates."""
    n_r = n_r or int(rng.integers(1, 4))
    n_u = n_u or int(rng.integers(1, 4))
    n_types = n_types or int(rng.integers(1, 3))

    resources = []
    for r in range(n_r):
        total = float(rng.uniform(0.25, 0.8))
        s_pr = float(rng.choice([0.0, rng.uniform(0.05, 0.6) * total]))
        kmax = int(rng.integers(0, max_karma + 1))
        resources.append(
            ResourceSpec(
                name=f"R{r + 1}",
                total_capacity=total,
                priority_capacity=s_pr,
                karma_max=kmax,
                karma_mean=int(rng.integers(0, kmax + 1)),
                discount=1.0 if r < n_r - 1 else float(rng.uniform(0.0, 0.95)),
            )
        )

    urgencies = (0.0,) + tuple(np.cumsum(rng.uniform(0.5, 4.0, size=n_u - 1)))

    shares = rng.random(n_types) + 0.2
    shares /= shares.sum()
    shares = np.round(shares, 6)
    shares[-1] = 1.0 - shares[:-1].sum()
    types = tuple(
        UserTypeSpec(name=f"T{t + 1}", share=float(shares[t]), chain=block_chain(rng, n_r, n_u))
        for t in range(n_types)
    )

    chi = np.eye(n_r)
    for a in range(n_r):
        for b in range(a + 1, n_r):
            kind = rng.choice(["none", "unit", "non_unit"])
            if kind == "unit":
                chi[a, b] = chi[b, a] = 1.0
            elif kind == "non_unit":
                rate = float(rng.choice([2.0, 1.5, 3.0]))
                chi[a, b], chi[b, a] = rate, 1.0 / rate
    positive_pr = [r.priority_capacity for r in resources if r.priority_capacity > 0]
    epsilon = 0.5 * min(positive_pr) if positive_pr else 1e-4
    epsilon = min(epsilon, 1e-2)
    worst = max(
        (min(1.0, 1.0 - r.priority_capacity + 2 * epsilon) - r.gp_capacity)
        / r.gp_capacity
        for r in resources
    )
    cfg = EconomyConfig(
        resources=tuple(resources),
        urgencies=urgencies,
        types=types,
        exchange=ExchangeMatrix(chi),
        redistribution=redistribution
        or RedistributionRule(rng.choice(["to_active", "to_all"])),
        nominal_payoff=float(max(worst, 0.0) + rng.uniform(0.5, 2.0)),
        epsilon=float(epsilon),
    )
    report = validate_config(cfg)
    assert report.ok, report
    return cfg


def random_social_state(
    rng: np.random.Generator, space: StateSpace, sparse_policy: bool = False
) -> SocialState:
    """Random valid social state for a space."""
    cfg = space.cfg
    dist = rng.random((cfg.n_types, space.n_resources, space.n_urgencies, space.n_karma))
    dist /= dist.sum(axis=(2, 3), keepdims=True)
    policy = rng.random(dist.shape + (space.n_bid_cols,))
    if sparse_policy:
        policy = policy * (rng.random(policy.shape) < 0.4)
        policy += 1e-12  # keep rows normalisable
    policy *= space.feasible[None, :, None]
    policy /= policy.sum(axis=4, keepdims=True)
    return SocialState(dist=dist, policy=policy)


# -- naive reference kernels ---------------------------------------------------


def naive_round(amount: float) -> list[tuple[int, float]]:
    lo = math.floor(amount + 1e-9)
    frac = amount - lo
    if frac < 1e-9:
        return [(lo, 1.0)]
    return [(lo, 1.0 - frac), (lo + 1, frac)]


def naive_payment(
    cfg: EconomyConfig, r: int, karma: tuple[int, ...], bid: int | None, outcome: int
) -> dict[tuple[int, ...], float]:
    """Reference payment transition: explicit case-by-case implementation."""
    if bid is None or outcome != OUTCOME_PR:
        return {tuple(karma): 1.0}
    chi = cfg.exchange.chi
    n_r = len(karma)
    k = list(karma)
    remaining = float(bid)
    own = min(remaining, k[r])
    k[r] -= int(own)
    remaining -= own
    acct = r
    for j in range(1, n_r):
        if remaining <= 1e-9:
            break
        acct = (r + j) % n_r
        rate = chi[r, acct]
        if rate <= 0:
            continue
        if remaining <= k[acct] * rate + 1e-9:
            exact = remaining / rate
            out: dict[tuple[int, ...], float] = {}
            for debit, p in naive_round(exact):
                kk = list(k)
                kk[acct] -= debit
                assert kk[acct] >= 0
                out[tuple(kk)] = out.get(tuple(kk), 0.0) + p
            return out
        remaining -= k[acct] * rate
        k[acct] = 0
    assert remaining <= 1e-9, "bid not covered"
    return {tuple(k): 1.0}


def naive_redistribution(
    plan: RedistributionPlan, r: int, karma_hat: tuple[int, ...], outcome: int
) -> dict[tuple[int, ...], float]:
    """Reference redistribution: nominal or boosted gain, rounded, capped."""
    eligible = plan.rule is RedistributionRule.TO_ALL or outcome != OUTCOME_OUT
    if not eligible:
        return {tuple(karma_hat): 1.0}
    gain = plan.base_gain
    if karma_hat[r] <= plan.nonsat_threshold:
        gain += plan.extra
    out: dict[tuple[int, ...], float] = {}
    for units, p in naive_round(gain):
        kk = list(karma_hat)
        kk[r] = min(kk[r] + units, plan.karma_max)
        out[tuple(kk)] = out.get(tuple(kk), 0.0) + p
    return out


def naive_state_transition(
    cfg: EconomyConfig,
    space: StateSpace,
    type_index: int,
    r: int,
    u: int,
    karma: tuple[int, ...],
    bid: int | None,
    psi_r: np.ndarray,
    plan: RedistributionPlan,
) -> dict[tuple[int, int, tuple[int, ...]], float]:
    """Reference full transition: urgency step times outcome-mixed kernels."""
    col = 0 if bid is None else bid + 1
    r_next = (r + 1) % cfg.n_resources
    karma_dist: dict[tuple[int, ...], float] = {}
    for o in (OUTCOME_PR, OUTCOME_GP, OUTCOME_OUT):
        w = psi_r[o, col]
        if w <= 0:
            continue
        for khat, p1 in naive_payment(cfg, r, karma, bid, o).items():
            for kplus, p2 in naive_redistribution(plan, r, khat, o).items():
                karma_dist[kplus] = karma_dist.get(kplus, 0.0) + w * p1 * p2
    out: dict[tuple[int, int, tuple[int, ...]], float] = {}
    for u_next in range(space.n_urgencies):
        pu = space.urgency_step[type_index, r, u, u_next]
        if pu <= 0:
            continue
        for kplus, pk in karma_dist.items():
            out[(r_next, u_next, kplus)] = pu * pk
    return out


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
