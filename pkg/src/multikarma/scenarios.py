"""Built-in scenario: the commute economy (highway express lane + priority
parking) and its redistribution/exchange design matrix.

Two resources are contested every day in order: the highway H, then parking
P.  Two equally-sized user types differ only in how often they need the
highway: suburb commuters (S) need both resources daily, city residents (C)
need parking daily but the highway only on half of the days.  Daily urgency
is drawn fresh each morning (low 1 with probability 0.75, high 9 with
probability 0.25) and applies to both competitions of that day.
"""

from __future__ import annotations

import numpy as np

from .model import (
    EconomyConfig,
    ExchangeMatrix,
    RedistributionRule,
    ResourceSpec,
    UserTypeSpec,
)

# Named rate pairs (chi[H, P], chi[P, H]) for the design matrix.  The
# non-unit labels order the two cross rates: "Exchange P>H" is the regime
# with chi[P, H] > chi[H, P] (each H-karma is worth 3/2 when bidding for
# parking), "Exchange P<H" the reverse.
EXCHANGE_REGIMES: dict[str, tuple[float, float]] = {
    "no_exchange": (0.0, 0.0),
    "unit": (1.0, 1.0),
    "p_gt_h": (2.0 / 3.0, 1.5),
    "p_lt_h": (1.5, 2.0 / 3.0),
}

REGIME_LABELS = {
    "no_exchange": "No Exchange",
    "unit": "Unit Exchange",
    "p_gt_h": "Exchange P>H",
    "p_lt_h": "Exchange P<H",
}

RULE_LABELS = {
    RedistributionRule.TO_ACTIVE: "Redist. to Active",
    RedistributionRule.TO_ALL: "Redist. to All",
}

# Day urgency distribution shared by both types: P[u=1], P[u=9].
_DAY_URGENCY = (0.75, 0.25)


def _commute_chain(highway_need: float) -> np.ndarray:
    """(r, u) chain over H/P and urgency {0, 1, 9}.

    Within the day the drawn urgency carries from H to P; the overnight row
    redraws it and flips the independent H-need coin.  From (H, 0) (no
    highway need today) the parking urgency is the day's draw.
    """
    lo, hi = _DAY_URGENCY
    n = 6  # (H,0) (H,1) (H,9) (P,0) (P,1) (P,9)
    chain = np.zeros((n, n))
    chain[0, 4], chain[0, 5] = lo, hi  # (H,0) -> (P, fresh day urgency)
    chain[1, 4] = 1.0  # (H,1) -> (P,1): urgency carries within the day
    chain[2, 5] = 1.0  # (H,9) -> (P,9)
    for row in (3, 4, 5):  # overnight: new day urgency, maybe no H-need
        chain[row, 0] = 1.0 - highway_need
        chain[row, 1] = highway_need * lo
        chain[row, 2] = highway_need * hi
    return chain


def commute_config(
    redistribution: RedistributionRule = RedistributionRule.TO_ALL,
    exchange_regime: str = "unit",
    priority_capacities: tuple[float, float] = (0.1875, 0.2),
) -> EconomyConfig:
    """The commute case-study economy for one design cell."""
    if exchange_regime not in EXCHANGE_REGIMES:
        raise ValueError(f"unknown exchange regime {exchange_regime!r}")
    chi_hp, chi_ph = EXCHANGE_REGIMES[exchange_regime]
    chi = np.array([[1.0, chi_hp], [chi_ph, 1.0]])
    return EconomyConfig(
        resources=(
            ResourceSpec(
                name="H",
                total_capacity=0.5,
                priority_capacity=priority_capacities[0],
                karma_max=24,
                karma_mean=8,
                discount=1.0,
            ),
            ResourceSpec(
                name="P",
                total_capacity=0.5,
                priority_capacity=priority_capacities[1],
                karma_max=24,
                karma_mean=8,
                discount=0.98,
            ),
        ),
        urgencies=(0.0, 1.0, 9.0),
        types=(
            UserTypeSpec(name="S", share=0.5, chain=_commute_chain(1.0)),
            UserTypeSpec(name="C", share=0.5, chain=_commute_chain(0.5)),
        ),
        exchange=ExchangeMatrix(chi),
        redistribution=redistribution,
        nominal_payoff=2.0,
        epsilon=1e-4,
    )


def benchmark_config(
    redistribution: RedistributionRule = RedistributionRule.TO_ALL,
    exchange_regime: str = "unit",
) -> EconomyConfig:
    """Commute economy with no reserved priority capacity (the benchmark)."""
    return commute_config(
        redistribution=redistribution,
        exchange_regime=exchange_regime,
        priority_capacities=(0.0, 0.0),
    )


def design_cells() -> list[tuple[RedistributionRule, str]]:
    """The 2 x 4 design matrix in presentation order."""
    return [
        (rule, regime)
        for rule in (RedistributionRule.TO_ACTIVE, RedistributionRule.TO_ALL)
        for regime in ("no_exchange", "unit", "p_gt_h", "p_lt_h")
    ]


def cell_label(rule: RedistributionRule, regime: str) -> str:
    return f"{RULE_LABELS[rule]} / {REGIME_LABELS[regime]}"
