"""Static description of a multi-karma economy and its enumerated state space.

An economy couples ``n_r`` public resources that the whole population competes
over in a fixed daily cycle (resource 1, then 2, ..., then n_r, then resource 1
of the next day).  Each resource has a reserved priority capacity auctioned for
karma and a congestible general-purpose remainder.  Users carry one integer
karma account per resource; bids for one resource may draw on the other
accounts through an exchange-rate matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

ROW_SUM_TOL = 1e-12

# Action encoding: column 0 is the "stay out" bid (no participation), column
# b + 1 is the integer bid b.  NO_BID is used wherever a bid column index is
# expected.
NO_BID = 0


class StateBudgetError(RuntimeError):
    """Raised when the enumerated state space exceeds the configured budget."""


class RedistributionRule(str, Enum):
    """Who receives shares of the karma collected at a resource."""

    TO_ACTIVE = "to_active"
    TO_ALL = "to_all"


@dataclass(frozen=True)
class ResourceSpec:
    """One public resource in the daily cycle.

    Capacities are fractions of the total population.  ``priority_capacity``
    is congestion-free and auctioned; the remainder ``gp_capacity`` is open to
    every active user but incurs a delay when over-demanded.  ``discount``
    must be 1.0 for every resource except the last of the day.
    """

    name: str
    total_capacity: float
    priority_capacity: float
    karma_max: int
    karma_mean: int
    discount: float

    @property
    def gp_capacity(self) -> float:
        return self.total_capacity - self.priority_capacity


@dataclass(frozen=True, eq=False)
class UserTypeSpec:
    """A user type: population share plus its resource-urgency Markov chain.

    ``chain`` is a row-stochastic matrix over (resource, urgency) pairs in
    row-major order (index = resource * n_u + urgency index).  From resource r
    all mass must move to resource r + 1 (wrapping to the first resource after
    the last), which encodes the sequential daily competitions.
    """

    name: str
    share: float
    chain: np.ndarray

    def __post_init__(self) -> None:
        chain = np.asarray(self.chain, dtype=float)
        chain.flags.writeable = False
        object.__setattr__(self, "chain", chain)


@dataclass(frozen=True, eq=False)
class ExchangeMatrix:
    """Exchange rates: chi[r, r'] is how much one unit of r'-karma is worth
    when bidding for resource r."""

    chi: np.ndarray

    def __post_init__(self) -> None:
        chi = np.asarray(self.chi, dtype=float)
        chi.flags.writeable = False
        object.__setattr__(self, "chi", chi)

    @classmethod
    def no_exchange(cls, n_r: int) -> "ExchangeMatrix":
        return cls(np.eye(n_r))

    @classmethod
    def unit(cls, n_r: int) -> "ExchangeMatrix":
        return cls(np.ones((n_r, n_r)))

    def regime(self) -> str:
        """Classify the configured rates: no_exchange / unit / non_unit / mixed."""
        chi = self.chi
        n_r = chi.shape[0]
        off = ~np.eye(n_r, dtype=bool)
        if n_r == 1 or np.all(chi[off] == 0.0):
            return "no_exchange"
        if np.all(chi[off] == 1.0):
            return "unit"
        prods = chi * chi.T
        if np.all(np.abs(prods[off] - 1.0) <= 1e-9) and np.all(chi[off] > 0):
            return "non_unit"
        return "mixed"


@dataclass(frozen=True, eq=False)
class EconomyConfig:
    """Full static description of one multi-karma economy scenario."""

    resources: tuple[ResourceSpec, ...]
    urgencies: tuple[float, ...]
    types: tuple[UserTypeSpec, ...]
    exchange: ExchangeMatrix
    redistribution: RedistributionRule
    nominal_payoff: float
    epsilon: float

    @property
    def n_resources(self) -> int:
        return len(self.resources)

    @property
    def n_urgencies(self) -> int:
        return len(self.urgencies)

    @property
    def n_types(self) -> int:
        return len(self.types)

    @property
    def type_shares(self) -> np.ndarray:
        return np.array([t.share for t in self.types])


@dataclass
class ValidationReport:
    """Outcome of validate_config: the list of violated invariants."""

    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "config valid"
        return "config invalid:\n" + "\n".join(f"  - {v}" for v in self.violations)


def max_bid(r: int, karma: Sequence[int], exchange: ExchangeMatrix) -> int:
    """Largest bid resource r's auction accepts from a user holding ``karma``:
    floor of the exchange-weighted sum of all accounts."""
    chi = exchange.chi
    total = float(np.dot(chi[r], np.asarray(karma, dtype=float)))
    # Guard the floor against representation fuzz (e.g. 2/3 rates summing to
    # an exact integer).
    return int(np.floor(total + 1e-9))


def validate_config(cfg: EconomyConfig) -> ValidationReport:
    """Check every structural invariant of the economy description.

    Returns a report listing violations; callers decide whether to abort.
    """
    bad: list[str] = []
    n_r = cfg.n_resources
    n_u = cfg.n_urgencies

    if n_r < 1:
        bad.append("at least one resource is required")
        return ValidationReport(bad)

    for r, res in enumerate(cfg.resources):
        if not 0.0 <= res.priority_capacity:
            bad.append(f"resource {res.name}: priority capacity must be >= 0")
        if not res.priority_capacity < res.total_capacity:
            bad.append(
                f"resource {res.name}: priority capacity must be below total capacity"
            )
        if not res.total_capacity < 1.0:
            bad.append(f"resource {res.name}: total capacity must be below 1")
        if res.gp_capacity <= 0.0:
            bad.append(f"resource {res.name}: general-purpose capacity must be > 0")
        if res.karma_max < 0:
            bad.append(f"resource {res.name}: karma_max must be >= 0")
        if not 0 <= res.karma_mean <= res.karma_max:
            bad.append(
                f"resource {res.name}: karma_mean must lie in [0, karma_max]"
            )
        if r < n_r - 1 and res.discount != 1.0:
            bad.append(
                f"resource {res.name}: within-day discount must be 1"
            )
        if r == n_r - 1 and not 0.0 <= res.discount < 1.0:
            bad.append(
                f"resource {res.name}: day-boundary discount must lie in [0, 1)"
            )

    if n_u < 1:
        bad.append("urgency set must be nonempty")
    else:
        if cfg.urgencies[0] != 0.0:
            bad.append("urgency set must start with 0 (the no-need level)")
        if any(b <= a for a, b in zip(cfg.urgencies, cfg.urgencies[1:])):
            bad.append("urgency levels must be strictly increasing")

    shares = [t.share for t in cfg.types]
    if not cfg.types:
        bad.append("at least one user type is required")
    else:
        if any(not 0.0 <= s <= 1.0 for s in shares):
            bad.append("type shares must lie in [0, 1]")
        if abs(sum(shares) - 1.0) > 1e-9:
            bad.append("type shares must sum to 1")

    n_ru = n_r * n_u
    for t in cfg.types:
        chain = t.chain
        if chain.shape != (n_ru, n_ru):
            bad.append(
                f"type {t.name}: chain must be {n_ru}x{n_ru} over (resource, urgency)"
            )
            continue
        if np.any(chain < 0.0):
            bad.append(f"type {t.name}: chain entries must be >= 0")
        row_sums = chain.sum(axis=1)
        if np.any(np.abs(row_sums - 1.0) > ROW_SUM_TOL):
            bad.append(f"type {t.name}: chain rows must sum to 1")
        for r in range(n_r):
            r_next = (r + 1) % n_r
            rows = chain[r * n_u : (r + 1) * n_u]
            mask = np.ones(n_ru, dtype=bool)
            mask[r_next * n_u : (r_next + 1) * n_u] = False
            if np.any(rows[:, mask] != 0.0):
                bad.append(
                    f"type {t.name}: from resource {r + 1} all mass must move to "
                    f"resource {r_next + 1} (the next competition)"
                )
                break

    chi = cfg.exchange.chi
    if chi.shape != (n_r, n_r):
        bad.append("exchange matrix must be n_r x n_r")
    else:
        if np.any(chi < 0.0):
            bad.append("exchange rates must be >= 0")
        if np.any(np.diag(chi) != 1.0):
            bad.append("own-resource exchange rate must be 1")
        for r in range(n_r):
            for r2 in range(r + 1, n_r):
                a, b = chi[r, r2], chi[r2, r]
                if a == 0.0 and b == 0.0:
                    continue
                if a == 0.0 or b == 0.0 or abs(a * b - 1.0) > 1e-9:
                    bad.append(
                        "non-unit exchange requires chi[r,r']*chi[r',r] = 1 "
                        f"(resources {cfg.resources[r].name}, {cfg.resources[r2].name})"
                    )

    for res in cfg.resources:
        if res.gp_capacity > 0.0:
            # Worst-case general-purpose demand: everyone active, priority
            # uptake can fall short of its capacity only by the epsilon
            # under-allocation slack.
            gp_demand = min(1.0, 1.0 - res.priority_capacity + 2.0 * cfg.epsilon)
            worst_delay = max((gp_demand - res.gp_capacity) / res.gp_capacity, 0.0)
            if cfg.nominal_payoff <= worst_delay:
                bad.append(
                    f"nominal payoff must exceed the worst-case delay "
                    f"{worst_delay:.6g} at resource {res.name}"
                )

    if cfg.epsilon <= 0.0:
        bad.append("epsilon must be > 0")
    positive_pr = [r.priority_capacity for r in cfg.resources if r.priority_capacity > 0]
    if positive_pr and cfg.epsilon >= min(positive_pr):
        bad.append("epsilon must be below the smallest positive priority capacity")

    return ValidationReport(bad)


class StateSpace:
    """Enumeration of the per-type state space [r, u, K] and its action sets.

    Karma vectors K are indexed in mixed radix with resource 0 most
    significant.  Bids are indexed on a shared axis: column 0 is the stay-out
    action, column b + 1 is the integer bid b; per-state feasibility masks
    restrict the axis to {stay out, 0..max_bid(r, K)}.
    """

    def __init__(self, cfg: EconomyConfig, budget: int = 10**6):
        report = validate_config(cfg)
        if not report.ok:
            raise ValueError(str(report))
        self.cfg = cfg
        n_r = cfg.n_resources
        n_u = cfg.n_urgencies

        sizes = np.array([res.karma_max + 1 for res in cfg.resources], dtype=np.int64)
        n_karma = int(np.prod(sizes))
        n_states = n_r * n_u * n_karma
        if n_states > budget:
            raise StateBudgetError(
                f"state space has {n_states} states per type, over budget {budget}"
            )

        strides = np.ones(n_r, dtype=np.int64)
        for r in range(n_r - 2, -1, -1):
            strides[r] = strides[r + 1] * sizes[r + 1]

        grids = np.meshgrid(*[np.arange(s) for s in sizes], indexing="ij")
        karma_grid = np.stack([g.reshape(-1) for g in grids], axis=1)

        chi = cfg.exchange.chi
        bid_cap = np.floor(karma_grid.astype(float) @ chi.T + 1e-9).astype(np.int64)

        self.n_resources = n_r
        self.n_urgencies = n_u
        self.n_karma = n_karma
        self.n_states = n_states
        self.karma_sizes = sizes
        self.karma_strides = strides
        self.karma_grid = karma_grid  # (n_karma, n_r)
        self.bid_cap = bid_cap.T.copy()  # (n_r, n_karma): max_bid per state
        self.n_bid_cols = int(self.bid_cap.max()) + 2  # stay-out + bids 0..max

        bids = np.arange(self.n_bid_cols - 1)
        # feasible[r, K, col]: col 0 (stay out) always allowed.
        feas = np.ones((n_r, n_karma, self.n_bid_cols), dtype=bool)
        feas[:, :, 1:] = bids[None, None, :] <= self.bid_cap[:, :, None]
        self.feasible = feas

        self.urgency_values = np.array(cfg.urgencies)
        # urgency_step[t, r, u, u+]: chain row restricted to the forced next
        # resource; rows sum to 1 by validation.
        steps = np.zeros((cfg.n_types, n_r, n_u, n_u))
        for ti, t in enumerate(cfg.types):
            for r in range(n_r):
                r_next = (r + 1) % n_r
                block = t.chain[
                    r * n_u : (r + 1) * n_u, r_next * n_u : (r_next + 1) * n_u
                ]
                steps[ti, r] = block
        self.urgency_step = steps

        self._payment_maps: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    # -- index maps --------------------------------------------------------

    def karma_index(self, karma: Sequence[int]) -> int:
        return int(np.dot(np.asarray(karma, dtype=np.int64), self.karma_strides))

    def karma_vector(self, index: int) -> np.ndarray:
        return self.karma_grid[index].copy()

    def state_index(self, r: int, u: int, karma_idx: int) -> int:
        return (r * self.n_urgencies + u) * self.n_karma + karma_idx

    def state_tuple(self, index: int) -> tuple[int, int, int]:
        karma_idx = index % self.n_karma
        ru = index // self.n_karma
        return ru // self.n_urgencies, ru % self.n_urgencies, karma_idx

    def actions(self, r: int, karma_idx: int) -> list[int | None]:
        """Action set at (r, K): None for stay-out plus integer bids."""
        cap = int(self.bid_cap[r, karma_idx])
        return [None] + list(range(cap + 1))

    # -- payment transitions ------------------------------------------------

    def payment_maps(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        """Post-payment karma transitions for priority winners at resource r.

        Returns (dst, prob) of shape (n_bids, n_karma, 2): for each integer
        bid b and karma index, up to two destination karma indices with
        probabilities (two when the cross-account debit needs probabilistic
        rounding).  Infeasible (b, K) pairs carry zero probability.
        """
        cached = self._payment_maps.get(r)
        if cached is not None:
            return cached

        n_bids = self.n_bid_cols - 1
        n_k = self.n_karma
        chi = self.cfg.exchange.chi
        dst = np.zeros((n_bids, n_k, 2), dtype=np.int64)
        prob = np.zeros((n_bids, n_k, 2))

        grid = self.karma_grid.astype(float)
        for b in range(n_bids):
            feas = b <= self.bid_cap[r]
            remaining = np.where(feas, float(b), 0.0)
            lo_idx = np.arange(n_k, dtype=np.int64)
            hi_idx = np.arange(n_k, dtype=np.int64)
            frac = np.zeros(n_k)
            # Debit the contested account first, then the others in cyclic
            # order at their exchange rates; only the final partial debit can
            # be fractional.
            for j in range(self.n_resources):
                acct = (r + j) % self.n_resources
                rate = chi[r, acct]
                if rate <= 0.0:
                    continue
                balance = grid[:, acct]
                can_cover = remaining <= balance * rate + 1e-9
                exact = np.where(can_cover, remaining / rate, balance)
                exact = np.minimum(exact, balance)
                lo = np.floor(exact + 1e-9)
                f = exact - lo
                f[f < 1e-9] = 0.0
                partial = can_cover & (f > 0.0)
                stride = self.karma_strides[acct]
                lo_idx = lo_idx - (lo.astype(np.int64)) * stride
                hi_idx = hi_idx - (lo.astype(np.int64) + partial.astype(np.int64)) * stride
                frac = np.where(partial, f, frac)
                remaining = np.where(can_cover, 0.0, remaining - balance * rate)
            if np.any(remaining[feas] > 1e-6):
                raise AssertionError(
                    "feasible bid could not be covered by convertible balances"
                )
            dst[b, :, 0] = np.where(feas, lo_idx, 0)
            dst[b, :, 1] = np.where(feas, hi_idx, 0)
            prob[b, :, 0] = np.where(feas, 1.0 - frac, 0.0)
            prob[b, :, 1] = np.where(feas, frac, 0.0)

        self._payment_maps[r] = (dst, prob)
        return dst, prob


def build_state_space(cfg: EconomyConfig, budget: int = 10**6) -> StateSpace:
    """Enumerate the state and action spaces of a validated config."""
    return StateSpace(cfg, budget=budget)


def stationary_urgency_conditionals(cfg: EconomyConfig) -> np.ndarray:
    """Stationary urgency distribution of each type's exogenous chain,
    conditioned on the resource slot; shape (n_types, n_r, n_u).

    The resource coordinate cycles deterministically, so the stationary
    marginal over resources is uniform and the conditionals are well defined.
    """
    n_r, n_u = cfg.n_resources, cfg.n_urgencies
    out = np.zeros((cfg.n_types, n_r, n_u))
    for ti, t in enumerate(cfg.types):
        n = n_r * n_u
        a = np.vstack([t.chain.T - np.eye(n), np.ones((1, n))])
        b = np.zeros(n + 1)
        b[-1] = 1.0
        x, *_ = np.linalg.lstsq(a, b, rcond=None)
        x = np.clip(x, 0.0, None)
        x /= x.sum()
        for r in range(n_r):
            block = x[r * n_u : (r + 1) * n_u]
            total = block.sum()
            out[ti, r] = block / total if total > 0 else np.full(n_u, 1.0 / n_u)
    return out


# -- JSON config files -------------------------------------------------------


def config_to_dict(cfg: EconomyConfig) -> dict:
    return {
        "resources": [
            {
                "name": res.name,
                "total_capacity": res.total_capacity,
                "priority_capacity": res.priority_capacity,
                "karma_max": res.karma_max,
                "karma_mean": res.karma_mean,
                "discount": res.discount,
            }
            for res in cfg.resources
        ],
        "urgencies": list(cfg.urgencies),
        "types": [
            {"name": t.name, "share": t.share, "chain": t.chain.tolist()}
            for t in cfg.types
        ],
        "exchange": cfg.exchange.chi.tolist(),
        "redistribution": cfg.redistribution.value,
        "nominal_payoff": cfg.nominal_payoff,
        "epsilon": cfg.epsilon,
    }


def config_from_dict(data: dict) -> EconomyConfig:
    return EconomyConfig(
        resources=tuple(
            ResourceSpec(
                name=r["name"],
                total_capacity=r["total_capacity"],
                priority_capacity=r["priority_capacity"],
                karma_max=r["karma_max"],
                karma_mean=r["karma_mean"],
                discount=r["discount"],
            )
            for r in data["resources"]
        ),
        urgencies=tuple(data["urgencies"]),
        types=tuple(
            UserTypeSpec(name=t["name"], share=t["share"], chain=np.array(t["chain"]))
            for t in data["types"]
        ),
        exchange=ExchangeMatrix(np.array(data["exchange"])),
        redistribution=RedistributionRule(data["redistribution"]),
        nominal_payoff=data["nominal_payoff"],
        epsilon=data["epsilon"],
    )


def save_config(cfg: EconomyConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path: str) -> EconomyConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))
