"""Stationary-equilibrium computation by damped perturbed best response.

The solver alternates four steps per outer iteration: recompute the field
quantities from the current social state, move each type's distribution to
the stationary distribution of its induced day-cyclic chain, evaluate values
and Q-values, and blend the policy a small step toward the softmax best
response whose temperature decays over iterations.  A report is accepted only
after an independent recomputation from the candidate social state alone
confirms the stationarity and Q-optimality residuals, so published equilibria
are certified rather than trusted from solver internals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import mdp, welfare
from .mean_field import (
    FieldQuantities,
    SocialState,
    compute_field,
    karma_transition_tables,
    validate_social_state,
)
from .model import EconomyConfig, StateSpace, build_state_space, stationary_urgency_conditionals

logger = logging.getLogger(__name__)

TRACE_FIELDS = (
    "iteration",
    "perturbation",
    "policy_move",
    "stationarity_residual",
    "q_gap",
    "welfare_endogenous",
    "welfare_exogenous",
)


class StationaryDistributionError(RuntimeError):
    """Power iteration did not reach the requested residual."""

    def __init__(self, residual: float, days: int):
        super().__init__(
            f"stationary distribution stalled at residual {residual:.3e} "
            f"after {days} days"
        )
        self.residual = residual
        self.days = days


@dataclass
class SolverSettings:
    """Hyperparameters of the perturbed-best-response iteration."""

    step_size: float = 0.1
    step_size_halflife: float | None = None  # decay eta ~ 1/(1 + t/halflife)
    perturbation_init: float = 1.0
    perturbation_decay: float = 0.985
    perturbation_min: float = 1e-4
    perturbation_schedule: str = "geometric"  # or "harmonic"
    perturbation_halflife: float = 25.0
    tol_stationary: float = 1e-8
    tol_policy: float = 1e-6
    tol_q_gap: float | None = None  # default: 1e-3 * nominal payoff
    max_outer: int = 3000
    stationary_max_days: int = 200_000
    value_max_sweeps: int = 50_000
    policy_prune: float = 1e-14
    seed: int = 0
    init_policy_jitter: float = 0.0
    finalize_every: int = 25
    trace_welfare: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.step_size <= 1.0:
            raise ValueError("step_size must lie in (0, 1]")
        for name in ("tol_stationary", "tol_policy"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")
        if self.tol_q_gap is not None and self.tol_q_gap <= 0.0:
            raise ValueError("tol_q_gap must be > 0")

    def perturbation_at(self, iteration: int) -> float:
        if self.perturbation_schedule == "harmonic":
            lam = self.perturbation_init / (1.0 + iteration / self.perturbation_halflife)
        else:
            lam = self.perturbation_init * self.perturbation_decay**iteration
        return max(lam, self.perturbation_min)

    def step_size_at(self, iteration: int) -> float:
        if self.step_size_halflife is None:
            return self.step_size
        return self.step_size / (1.0 + iteration / self.step_size_halflife)


@dataclass(eq=False)
class SolveReport:
    """Converged (or honestly non-converged) equilibrium and its residuals."""

    social: SocialState
    field: FieldQuantities
    stationarity_residual: float
    policy_move: float
    q_gap: float
    iterations: int
    converged: bool
    tol_stationary: float
    tol_policy: float
    tol_q_gap: float
    karma_account_means: np.ndarray  # (n_types, n_r slots, n_r accounts)
    saturation_surplus: np.ndarray  # (n_r,)
    saturation_lost: np.ndarray  # (n_r,)
    trace: list = dataclass_field(default_factory=list)


def default_social_state(
    space: StateSpace, jitter: float = 0.0, seed: int = 0
) -> SocialState:
    """Symmetric start: karma point mass at the endowment, urgency at the
    chain's stationary conditional, uniform policy over feasible actions."""
    cfg = space.cfg
    k0 = space.karma_index([res.karma_mean for res in cfg.resources])
    cond = stationary_urgency_conditionals(cfg)
    dist = np.zeros((cfg.n_types, space.n_resources, space.n_urgencies, space.n_karma))
    dist[:, :, :, k0] = cond
    feas = space.feasible.astype(float)  # (n_r, n_K, n_bc)
    pol = feas / feas.sum(axis=2, keepdims=True)
    policy = np.broadcast_to(
        pol[None, :, None], (cfg.n_types, space.n_resources, space.n_urgencies)
        + pol.shape[1:],
    ).copy()
    if jitter > 0.0:
        rng = np.random.default_rng(seed)
        policy *= 1.0 + jitter * rng.random(policy.shape)
        policy *= space.feasible[None, :, None]
        policy /= policy.sum(axis=4, keepdims=True)
    return SocialState(dist=dist, policy=policy)


def _push_stage(stage: mdp.DayStage, dist_ru: np.ndarray) -> np.ndarray:
    """One resource competition applied to a (n_u, n_K) distribution."""
    moved = np.stack(
        [stage.karma_ops[u].T @ dist_ru[u] for u in range(dist_ru.shape[0])]
    )
    return stage.urgency_mix.T @ moved


def _stationary_slots(
    stages: list[mdp.DayStage],
    start: np.ndarray,
    tol: float,
    max_days: int,
) -> tuple[np.ndarray, float, int]:
    """Iterate full days until the first-slot distribution stops moving.

    Returns (per-slot distributions, last one-day total-variation change,
    days used).  Falls back to a half-lazy update when plain iteration stalls
    (periodic karma dynamics), which preserves fixed points.
    """
    d0 = start.copy()
    lazy = False
    stall = 0
    prev_delta = np.inf
    days = 0
    delta = np.inf
    while days < max_days:
        cur = d0
        for stage in stages:
            cur = _push_stage(stage, cur)
        days += 1
        delta = 0.5 * float(np.abs(cur - d0).sum())
        if lazy:
            d0 = 0.5 * (d0 + cur)
        else:
            d0 = cur
        if delta <= tol:
            break
        if delta > prev_delta * 0.9995:
            stall += 1
            if stall > 200:
                lazy = True
        else:
            stall = 0
        prev_delta = delta
    slots = [d0]
    for stage in stages[:-1]:
        slots.append(_push_stage(stage, slots[-1]))
    return np.stack(slots), delta, days


def stationary_distribution(
    space: StateSpace,
    social: SocialState,
    field: FieldQuantities,
    tol: float = 1e-8,
    max_days: int = 200_000,
    start: np.ndarray | None = None,
) -> np.ndarray:
    """Stationary per-slot distributions of every type under a fixed field.

    The population distribution at each resource slot must be the push-forward
    of the previous slot's distribution through that competition, cyclically
    across the day boundary.  Starting point defaults to ``social.dist``
    (reducible karma dynamics converge to the limit seeded by it).
    """
    tables = karma_transition_tables(space, field)
    out = np.empty_like(social.dist)
    for t in range(space.cfg.n_types):
        stages = mdp.build_day_stages(space, social, field, t, tables=tables)
        init = social.dist[t, 0] if start is None else start[t, 0]
        slots, delta, days = _stationary_slots(stages, init, tol, max_days)
        if delta > tol:
            raise StationaryDistributionError(delta, days)
        out[t] = slots
    return out


def stationarity_residual(
    space: StateSpace, social: SocialState, field: FieldQuantities | None = None
) -> float:
    """One-step check: worst total-variation gap between each slot's
    distribution and the push-forward of the previous slot's."""
    if field is None:
        field = compute_field(space, social)
    tables = karma_transition_tables(space, field)
    worst = 0.0
    n_r = space.n_resources
    for t in range(space.cfg.n_types):
        stages = mdp.build_day_stages(space, social, field, t, tables=tables)
        for r in range(n_r):
            pushed = _push_stage(stages[r - 1], social.dist[t, r - 1])
            tv = 0.5 * float(np.abs(pushed - social.dist[t, r]).sum())
            worst = max(worst, tv)
    return worst


def smoothed_policy_update(
    policy: np.ndarray,
    q: np.ndarray,
    perturbation: float,
    step_size: float,
    feasible: np.ndarray,
    prune: float = 0.0,
) -> np.ndarray:
    """Blend the policy toward the softmax best response.

    The target is softmax(q / perturbation) over feasible actions (the exact
    best-response set, split uniformly, when perturbation is 0); the new
    policy is (1 - step_size) * policy + step_size * target, with negligible
    mass pruned and rows renormalised.  Infeasible actions keep zero mass.
    """
    best = np.max(np.where(feasible, q, -np.inf), axis=-1, keepdims=True)
    if perturbation > 0.0:
        z = np.where(feasible, (q - best) / perturbation, -np.inf)
        target = np.exp(z)
    else:
        target = (feasible & (q >= best)).astype(float)
    target /= target.sum(axis=-1, keepdims=True)
    out = (1.0 - step_size) * policy + step_size * target
    if prune > 0.0:
        out[out < prune] = 0.0
    out /= out.sum(axis=-1, keepdims=True)
    return out


def q_optimality_gap(q: np.ndarray, policy: np.ndarray, feasible: np.ndarray) -> float:
    """Worst per-state shortfall of the policy value against the best action."""
    safe_q = np.where(feasible, q, 0.0)
    best = np.max(np.where(feasible, q, -np.inf), axis=-1)
    mean = np.einsum("...c,...c->...", policy, safe_q)
    return float((best - mean).max())


def _policy_movement(new: np.ndarray, old: np.ndarray) -> float:
    return 0.5 * float(np.abs(new - old).sum(axis=-1).max())


def _karma_account_means(space: StateSpace, social: SocialState) -> np.ndarray:
    return np.einsum("truk,ka->tra", social.dist, space.karma_grid.astype(float))


def solve_sne(
    cfg: EconomyConfig,
    settings: SolverSettings | None = None,
    init: SocialState | None = None,
    space: StateSpace | None = None,
) -> SolveReport:
    """Compute a certified stationary equilibrium of the economy.

    Returns a report whose residuals were re-derived from the candidate
    social state; when the iteration budget runs out the report carries
    converged=False and the last residuals instead of raising.
    """
    settings = settings or SolverSettings()
    space = space or build_state_space(cfg)
    social = (
        init.copy()
        if init is not None
        else default_social_state(
            space, jitter=settings.init_policy_jitter, seed=settings.seed
        )
    )
    problems = validate_social_state(space, social)
    if problems:
        raise ValueError("invalid initial social state: " + "; ".join(problems))

    tol_q_gap = (
        settings.tol_q_gap
        if settings.tol_q_gap is not None
        else 1e-3 * cfg.nominal_payoff
    )
    n_types = cfg.n_types
    feasible = space.feasible[None, :, None]  # broadcast over types, urgencies
    bench = welfare.benchmark_payoffs(cfg) if settings.trace_welfare else None

    values: list[list[np.ndarray]] = [
        [np.zeros((space.n_urgencies, space.n_karma)) for _ in range(space.n_resources)]
        for _ in range(n_types)
    ]
    trace: list[dict] = []
    policy_move = math.inf
    stat_delta = math.inf
    gap = math.inf
    field = compute_field(space, social)
    last_finalize = -1

    def record(iteration: int, lam: float) -> None:
        row = {
            "iteration": iteration,
            "perturbation": lam,
            "policy_move": policy_move,
            "stationarity_residual": stat_delta,
            "q_gap": gap,
            "welfare_endogenous": math.nan,
            "welfare_exogenous": math.nan,
        }
        if bench is not None:
            try:
                rep = welfare.welfare_report(space, social, field, bench)
                if rep.welfare_endogenous is not None:
                    row["welfare_endogenous"] = rep.welfare_endogenous
                if rep.welfare_exogenous is not None:
                    row["welfare_exogenous"] = rep.welfare_exogenous
            except ValueError:
                pass
        trace.append(row)
        logger.info(
            "trace,%d,%.6g,%.3e,%.3e,%.3e,%.6g,%.6g",
            iteration,
            lam,
            row["policy_move"],
            row["stationarity_residual"],
            row["q_gap"],
            row["welfare_endogenous"],
            row["welfare_exogenous"],
        )

    def finalize() -> tuple[float, float] | None:
        """Polish the distribution against the recomputed field and measure
        certified residuals for the frozen policy."""
        nonlocal field, social, values
        resid = math.inf
        for _ in range(60):
            field = compute_field(space, social)
            try:
                dist = stationary_distribution(
                    space,
                    social,
                    field,
                    tol=0.25 * settings.tol_stationary,
                    max_days=settings.stationary_max_days,
                    start=social.dist,
                )
            except StationaryDistributionError:
                return None
            social = SocialState(dist=dist, policy=social.policy)
            resid = stationarity_residual(space, social)
            if resid <= 0.9 * settings.tol_stationary:
                break
        if resid > settings.tol_stationary:
            return None
        field = compute_field(space, social)
        tables = karma_transition_tables(space, field)
        worst_gap = 0.0
        for t in range(n_types):
            vf = mdp.value_iteration(
                space,
                social,
                field,
                t,
                tol=min(1e-9, 0.01 * tol_q_gap * (1.0 - _day_discount(cfg))),
                max_sweeps=settings.value_max_sweeps,
                init=values[t],
                tables=tables,
            )
            values[t] = list(vf.values)
            feas_t = np.broadcast_to(space.feasible[:, None], vf.action_values.shape)
            worst_gap = max(
                worst_gap, q_optimality_gap(vf.action_values, social.policy[t], feas_t)
            )
        return resid, worst_gap

    iteration = 0
    converged = False
    for iteration in range(settings.max_outer):
        lam = settings.perturbation_at(iteration)
        field = compute_field(space, social)
        tables = karma_transition_tables(space, field)

        inner_tol = min(1e-5, max(0.25 * settings.tol_stationary, 1e-3 * policy_move))
        inner_tol = max(inner_tol, 0.25 * settings.tol_stationary)
        new_q = []
        try:
            for t in range(n_types):
                stages = mdp.build_day_stages(space, social, field, t, tables=tables)
                slots, stat_delta, _ = _stationary_slots(
                    stages, social.dist[t, 0], inner_tol, settings.stationary_max_days
                )
                social.dist[t] = slots
                value_tol = min(1e-6, max(1e-10, 1e-4 * policy_move))
                vals, _ = mdp.evaluate_values(
                    stages,
                    tol=value_tol,
                    max_sweeps=settings.value_max_sweeps,
                    init=values[t],
                )
                values[t] = vals
                new_q.append(mdp.q_values(space, field, t, vals, tables=tables))
        except mdp.ValueIterationError as exc:
            logger.warning("value recursion failed at iteration %d: %s", iteration, exc)
            break

        q = np.stack(new_q)
        gap = q_optimality_gap(q, social.policy, np.broadcast_to(feasible, q.shape))
        new_policy = smoothed_policy_update(
            social.policy,
            q,
            lam,
            settings.step_size_at(iteration),
            np.broadcast_to(feasible, q.shape),
            prune=settings.policy_prune,
        )
        policy_move = _policy_movement(new_policy, social.policy)
        social.policy = new_policy
        record(iteration, lam)

        at_floor = lam <= settings.perturbation_min * (1.0 + 1e-12)
        if (
            at_floor
            and policy_move <= settings.tol_policy
            and gap <= tol_q_gap
            and iteration - last_finalize >= settings.finalize_every
        ):
            last_finalize = iteration
            outcome = finalize()
            if outcome is not None:
                resid, final_gap = outcome
                if final_gap <= tol_q_gap:
                    stat_delta, gap = resid, final_gap
                    converged = True
                    iteration += 1
                    break

    if not converged:
        # Report honest certificate residuals for the final state.
        field = compute_field(space, social)
        stat_delta = stationarity_residual(space, social, field)
        q_all = np.stack(
            [
                mdp.q_values(space, field, t, values[t])
                for t in range(n_types)
            ]
        )
        gap = q_optimality_gap(
            q_all, social.policy, np.broadcast_to(feasible, q_all.shape)
        )
        iteration = settings.max_outer

    field = compute_field(space, social)
    return SolveReport(
        social=social,
        field=field,
        stationarity_residual=stat_delta,
        policy_move=policy_move,
        q_gap=gap,
        iterations=iteration,
        converged=converged,
        tol_stationary=settings.tol_stationary,
        tol_policy=settings.tol_policy,
        tol_q_gap=tol_q_gap,
        karma_account_means=_karma_account_means(space, social),
        saturation_surplus=np.array([p.surplus for p in field.plans]),
        saturation_lost=np.array([p.lost for p in field.plans]),
        trace=trace,
    )


def _day_discount(cfg: EconomyConfig) -> float:
    return float(np.prod([res.discount for res in cfg.resources]))


def certify_report(
    cfg: EconomyConfig,
    social: SocialState,
    tol_stationary: float = 1e-8,
    tol_q_gap: float | None = None,
) -> dict:
    """Independent one-step check of a reported equilibrium.

    Rebuilds the state space, field, stationarity residual, and Q-optimality
    gap from the social state alone and compares them to the tolerances.
    """
    space = build_state_space(cfg)
    problems = validate_social_state(space, social)
    if problems:
        raise ValueError("invalid social state: " + "; ".join(problems))
    if tol_q_gap is None:
        tol_q_gap = 1e-3 * cfg.nominal_payoff
    field = compute_field(space, social)
    resid = stationarity_residual(space, social, field)
    tables = karma_transition_tables(space, field)
    day = _day_discount(cfg)
    gap = 0.0
    for t in range(cfg.n_types):
        vf = mdp.value_iteration(
            space,
            social,
            field,
            t,
            tol=min(1e-10, 0.01 * tol_q_gap * (1.0 - day)),
            tables=tables,
        )
        feas = np.broadcast_to(
            space.feasible[:, None], vf.action_values.shape
        )
        gap = max(gap, q_optimality_gap(vf.action_values, social.policy[t], feas))
    return {
        "stationarity_residual": resid,
        "q_gap": gap,
        "ok": resid <= tol_stationary and gap <= tol_q_gap,
        "tol_stationary": tol_stationary,
        "tol_q_gap": tol_q_gap,
    }
