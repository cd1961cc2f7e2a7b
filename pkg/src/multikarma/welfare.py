"""Long-run individual payoffs, the uncontrolled benchmark, and Nash welfare.

Individual welfare is the long-run average payoff per resource-competition
step, in two flavours: endogenous inactivity counts stay-out steps (at zero
payoff) in the average, exogenous inactivity drops them from both numerator
and denominator.  Social welfare is the share-weighted sum of log payoff
gains over the uncontrolled benchmark in which no capacity is reserved for
priority access, so every active user endures the same congestion delay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mean_field import FieldQuantities, SocialState, payoff_table
from .model import EconomyConfig, StateSpace, stationary_urgency_conditionals


class BenchmarkDominanceError(ValueError):
    """A type does not strictly improve over the benchmark; log welfare is
    undefined."""


@dataclass
class BenchmarkPayoffs:
    """Analytic payoffs of the uncontrolled (no priority capacity) allocation."""

    type_names: tuple[str, ...]
    delays: np.ndarray  # (n_r,)
    demands: np.ndarray  # (n_r,) active share per resource
    endogenous: np.ndarray  # (n_types,)
    exogenous: np.ndarray  # (n_types,)


@dataclass
class WelfareReport:
    """Per-type average payoffs and Nash welfare for one solved economy."""

    type_names: tuple[str, ...]
    shares: np.ndarray
    endogenous: np.ndarray
    exogenous: np.ndarray
    benchmark_endogenous: np.ndarray
    benchmark_exogenous: np.ndarray
    welfare_endogenous: float | None
    welfare_exogenous: float | None


def average_payoff(
    space: StateSpace,
    social: SocialState,
    field: FieldQuantities,
    type_index: int,
    mode: str = "endogenous",
) -> float:
    """Long-run average payoff of one type at a social state.

    mode "endogenous" averages over every resource-competition step;
    "exogenous" averages over actively-bidding steps only and raises when the
    type never bids.
    """
    if mode not in ("endogenous", "exogenous"):
        raise ValueError(f"unknown mode {mode!r}")
    payoffs = payoff_table(space, field)
    d = social.dist[type_index]
    pi = social.policy[type_index]
    start = 1 if mode == "exogenous" else 0
    weights = np.einsum("ruk,rukc->ruc", d, pi[..., start:])
    num = float(np.einsum("ruc,ruc->", weights, payoffs[..., start:]))
    den = float(weights.sum())
    if den <= 1e-14:
        raise ValueError(
            f"type {space.cfg.types[type_index].name} has no active steps; "
            "exogenous average payoff is undefined"
        )
    return num / den


def benchmark_payoffs(cfg: EconomyConfig) -> BenchmarkPayoffs:
    """Closed-form payoffs when every resource's priority capacity is zero.

    Nobody can win priority access, so no karma changes hands and users with
    positive urgency consume general-purpose access while the rest stay out;
    delays follow from the stationary active shares alone.
    """
    cond = stationary_urgency_conditionals(cfg)  # (n_types, n_r, n_u)
    u_vals = np.array(cfg.urgencies)
    active = u_vals > 0
    g = cfg.type_shares
    n_r = cfg.n_resources

    demands = np.einsum("t,tru->r", g, cond[:, :, active])
    delays = np.zeros(n_r)
    for r, res in enumerate(cfg.resources):
        gp = res.total_capacity  # benchmark reserves nothing for priority
        delays[r] = max((demands[r] - gp) / gp, 0.0)

    endo = np.zeros(cfg.n_types)
    exo = np.zeros(cfg.n_types)
    for t in range(cfg.n_types):
        num = 0.0
        active_steps = 0.0
        for r in range(n_r):
            per_u = cond[t, r, active] * u_vals[active]
            num += float(per_u.sum()) * (cfg.nominal_payoff - delays[r])
            active_steps += float(cond[t, r, active].sum())
        endo[t] = num / n_r
        if active_steps <= 1e-14:
            raise ValueError(
                f"type {cfg.types[t].name} is never active; benchmark "
                "exogenous payoff is undefined"
            )
        exo[t] = num / active_steps
    return BenchmarkPayoffs(
        type_names=tuple(t.name for t in cfg.types),
        delays=delays,
        demands=demands,
        endogenous=endo,
        exogenous=exo,
    )


def nash_welfare(
    payoffs: np.ndarray,
    benchmark: np.ndarray,
    shares: np.ndarray,
    type_names: tuple[str, ...] | None = None,
) -> float:
    """Share-weighted sum of log payoff gains over the benchmark.

    Requires every type to strictly beat its benchmark payoff; scaling all
    gains by c > 0 shifts the result by exactly log c, leaving design
    rankings unchanged.
    """
    payoffs = np.asarray(payoffs, dtype=float)
    benchmark = np.asarray(benchmark, dtype=float)
    gains = payoffs - benchmark
    if np.any(gains <= 0.0):
        idx = int(np.argmin(gains))
        name = type_names[idx] if type_names else f"type {idx}"
        raise BenchmarkDominanceError(
            f"benchmark not Pareto-dominated: {name} gains {gains[idx]:.6g}"
        )
    return float(np.dot(shares, np.log(gains)))


def welfare_report(
    space: StateSpace,
    social: SocialState,
    field: FieldQuantities,
    benchmark: BenchmarkPayoffs | None = None,
) -> WelfareReport:
    """Assemble both payoff averages and both welfare values for a solution.

    Nash welfare entries are None when some type fails to beat the benchmark
    (the error is reserved for direct nash_welfare calls).
    """
    cfg = space.cfg
    benchmark = benchmark or benchmark_payoffs(cfg)
    endo = np.array(
        [average_payoff(space, social, field, t, "endogenous") for t in range(cfg.n_types)]
    )
    exo = np.array(
        [average_payoff(space, social, field, t, "exogenous") for t in range(cfg.n_types)]
    )
    names = tuple(t.name for t in cfg.types)
    shares = cfg.type_shares
    try:
        sw_en = nash_welfare(endo, benchmark.endogenous, shares, names)
    except BenchmarkDominanceError:
        sw_en = None
    try:
        sw_ex = nash_welfare(exo, benchmark.exogenous, shares, names)
    except BenchmarkDominanceError:
        sw_ex = None
    return WelfareReport(
        type_names=names,
        shares=shares,
        endogenous=endo,
        exogenous=exo,
        benchmark_endogenous=benchmark.endogenous,
        benchmark_exogenous=benchmark.exogenous,
        welfare_endogenous=sw_en,
        welfare_exogenous=sw_ex,
    )
