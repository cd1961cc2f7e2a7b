import numpy as np
import pytest

from multikarma import scenarios
from multikarma.equilibrium import default_social_state
from multikarma.mean_field import compute_field
from multikarma.mdp import (
    DayStage,
    ValueIterationError,
    best_response_set,
    build_day_stages,
    evaluate_values,
    expected_rewards,
    q_values,
    value_iteration,
)
from multikarma.model import build_state_space

from conftest import naive_state_transition, random_economy, random_social_state


def scalar_stage(reward: float, discount: float) -> DayStage:
    return DayStage(
        rewards=np.array([[reward]]),
        karma_ops=[np.array([[1.0]])],
        urgency_mix=np.array([[1.0]]),
        discount=discount,
    )


def random_stages(rng, n_stages: int, max_states: int = 200) -> list[DayStage]:
    """Random day cycle; per-stage state counts share (n_u, n_K) shapes."""
    n_u = int(rng.integers(1, 4))
    n_k = int(rng.integers(1, max_states // (n_stages * n_u) + 1))
    stages = []
    for s in range(n_stages):
        ops = []
        for _ in range(n_u):
            m = rng.random((n_k, n_k)) + 0.01
            m /= m.sum(axis=1, keepdims=True)
            ops.append(m)
        mix = rng.random((n_u, n_u)) + 0.01
        mix /= mix.sum(axis=1, keepdims=True)
        stages.append(
            DayStage(
                rewards=rng.normal(size=(n_u, n_k)),
                karma_ops=ops,
                urgency_mix=mix,
                discount=1.0 if s < n_stages - 1 else float(rng.uniform(0.0, 0.99)),
            )
        )
    return stages


def dense_stage_matrix(stage: DayStage) -> np.ndarray:
    """Flat (n_u*n_K) transition matrix of one stage."""
    n_u, n_k = stage.rewards.shape
    flat = np.zeros((n_u * n_k, n_u * n_k))
    for u in range(n_u):
        op = stage.karma_ops[u]
        op = op.toarray() if hasattr(op, "toarray") else op
        for u2 in range(n_u):
            flat[u * n_k : (u + 1) * n_k, u2 * n_k : (u2 + 1) * n_k] = (
                stage.urgency_mix[u, u2] * op
            )
    return flat


def linear_solve_values(stages: list[DayStage]) -> list[np.ndarray]:
    """Independent oracle: direct solve of the stacked evaluation equations."""
    n = len(stages)
    sizes = [s.rewards.size for s in stages]
    total = sum(sizes)
    offsets = np.cumsum([0] + sizes)
    a = np.eye(total)
    b = np.zeros(total)
    for r, stage in enumerate(stages):
        nxt = (r + 1) % n
        block = dense_stage_matrix(stage) * stage.discount
        a[offsets[r] : offsets[r + 1], offsets[nxt] : offsets[nxt] + sizes[nxt]] -= block
        b[offsets[r] : offsets[r + 1]] = stage.rewards.reshape(-1)
    v = np.linalg.solve(a, b)
    return [
        v[offsets[r] : offsets[r + 1]].reshape(stages[r].rewards.shape)
        for r in range(n)
    ]


class TestEvaluateValues:
    def test_zero_rewards_zero_values(self, rng):
        stages = random_stages(rng, 2)
        for s in stages:
            s.rewards[:] = 0.0
        values, resid = evaluate_values(stages, tol=1e-12)
        for v in values:
            np.testing.assert_allclose(v, 0.0, atol=1e-10)
        assert resid <= 1e-12

    def test_single_state_geometric_series(self):
        values, _ = evaluate_values([scalar_stage(1.0, 0.98)], tol=1e-12)
        assert values[0][0, 0] == pytest.approx(50.0, abs=1e-9)

    def test_two_state_daily_cycle(self):
        # V1 = 1 + V2, V2 = 2 + 0.98 V1  =>  V1 = 3 / 0.02 = 150, V2 = 149.
        stages = [scalar_stage(1.0, 1.0), scalar_stage(2.0, 0.98)]
        values, _ = evaluate_values(stages, tol=1e-12)
        assert values[0][0, 0] == pytest.approx(150.0, abs=1e-8)
        assert values[1][0, 0] == pytest.approx(149.0, abs=1e-8)
        oracle = linear_solve_values(stages)
        assert oracle[0][0, 0] == pytest.approx(150.0, abs=1e-10)
        assert oracle[1][0, 0] == pytest.approx(149.0, abs=1e-10)

    def test_matches_linear_solve_random_instances(self, rng):
        for _ in range(12):
            stages = random_stages(rng, int(rng.integers(1, 4)))
            values, resid = evaluate_values(stages, tol=1e-11)
            oracle = linear_solve_values(stages)
            for got, want in zip(values, oracle):
                assert np.abs(got - want).max() <= 1e-8
            assert resid <= 1e-11

    def test_non_convergence_raises_with_residual(self, rng):
        stages = random_stages(rng, 2)
        with pytest.raises(ValueIterationError) as err:
            evaluate_values(stages, tol=1e-14, max_sweeps=2)
        assert err.value.residual > 0

    def test_day_composite_contraction(self, rng):
        # One full sweep contracts value differences by the day discount.
        stages = random_stages(rng, 2)
        day = float(np.prod([s.discount for s in stages]))

        def sweep(v):
            v = [x.copy() for x in v]
            for r in reversed(range(len(stages))):
                stage = stages[r]
                nxt = v[(r + 1) % len(stages)]
                vbar = stage.urgency_mix @ nxt
                ev = np.stack([stage.karma_ops[u] @ vbar[u] for u in range(vbar.shape[0])])
                v[r] = stage.rewards + stage.discount * ev
            return v

        for _ in range(5):
            v = [rng.normal(size=s.rewards.shape) for s in stages]
            w = [rng.normal(size=s.rewards.shape) for s in stages]
            v2, w2 = sweep(v), sweep(w)
            before = max(np.abs(a - b).max() for a, b in zip(v, w))
            after = np.abs(v2[0] - w2[0]).max()
            assert after <= day * before + 1e-12


class TestEconomyIntegration:
    def test_stage_rows_match_naive_transitions(self, rng):
        for _ in range(3):
            cfg = random_economy(rng)
            space = build_state_space(cfg)
            social = random_social_state(rng, space)
            field = compute_field(space, social)
            for t in range(cfg.n_types):
                stages = build_day_stages(space, social, field, t)
                flat = dense_stage_matrix(stages[0])
                for _ in range(6):
                    u = int(rng.integers(space.n_urgencies))
                    k_idx = int(rng.integers(space.n_karma))
                    expected = np.zeros((space.n_urgencies, space.n_karma))
                    pi_row = social.policy[t, 0, u, k_idx]
                    for col in np.flatnonzero(pi_row):
                        bid = None if col == 0 else int(col - 1)
                        ref = naive_state_transition(
                            cfg, space, t, 0, u, tuple(space.karma_vector(k_idx)),
                            bid, field.outcome_probs[0], field.plans[0],
                        )
                        for (_, u2, kplus), p in ref.items():
                            expected[u2, space.karma_index(kplus)] += pi_row[col] * p
                    got = flat[u * space.n_karma + k_idx].reshape(
                        space.n_urgencies, space.n_karma
                    )
                    np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_economy_values_match_linear_solve(self, rng):
        for _ in range(4):
            cfg = random_economy(rng, max_karma=2)
            space = build_state_space(cfg)
            if space.n_states > 200:
                continue
            social = random_social_state(rng, space)
            field = compute_field(space, social)
            for t in range(cfg.n_types):
                stages = build_day_stages(space, social, field, t)
                values, _ = evaluate_values(stages, tol=1e-11)
                oracle = linear_solve_values(stages)
                for got, want in zip(values, oracle):
                    assert np.abs(got - want).max() <= 1e-8


class TestExpectedRewards:
    def test_stay_out_policy_zero(self):
        space = build_state_space(scenarios.commute_config())
        social = default_social_state(space)
        social.policy[:] = 0.0
        social.policy[..., 0] = 1.0
        field = compute_field(space, social)
        r = expected_rewards(space, social, field, 0)
        np.testing.assert_allclose(r, 0.0, atol=1e-14)

    def test_mixed_policy_linearity(self, rng):
        cfg = random_economy(rng, n_types=1)
        space = build_state_space(cfg)
        social = random_social_state(rng, space)
        field = compute_field(space, social)
        from multikarma.mean_field import payoff_table

        payoffs = payoff_table(space, field)
        # A 50/50 mix of stay-out (payoff 0) and bid 0 earns half the bid-0 payoff.
        social.policy[:] = 0.0
        social.policy[..., 0] = 0.5
        social.policy[..., 1] = 0.5
        r = expected_rewards(space, social, field, 0)
        np.testing.assert_allclose(r, 0.5 * payoffs[:, :, None, 1].repeat(space.n_karma, 2), atol=1e-12)


class TestQValues:
    def test_stay_out_zero_when_no_continuation(self, rng):
        cfg = random_economy(rng, n_r=1, n_types=1)
        space = build_state_space(cfg)
        social = random_social_state(rng, space)
        field = compute_field(space, social)
        values = [np.zeros((space.n_urgencies, space.n_karma))]
        q = q_values(space, field, 0, values)
        np.testing.assert_allclose(q[0, :, :, 0], 0.0, atol=1e-14)

    def test_terminal_day_q_equals_immediate(self, rng):
        from multikarma.model import (
            EconomyConfig,
            ExchangeMatrix,
            RedistributionRule,
            ResourceSpec,
            UserTypeSpec,
        )

        chain = np.array([[0.5, 0.5], [0.4, 0.6]])
        cfg = EconomyConfig(
            resources=(ResourceSpec("R1", 0.5, 0.1, 2, 1, discount=0.0),),
            urgencies=(0.0, 2.0),
            types=(UserTypeSpec("T1", 1.0, chain),),
            exchange=ExchangeMatrix.no_exchange(1),
            redistribution=RedistributionRule.TO_ALL,
            nominal_payoff=3.0,
            epsilon=1e-3,
        )
        space = build_state_space(cfg)
        social = random_social_state(rng, space)
        field = compute_field(space, social)
        vf = value_iteration(space, social, field, 0, tol=1e-12)
        from multikarma.mean_field import payoff_table

        payoffs = payoff_table(space, field)
        feas = space.feasible[0]
        for u in range(2):
            for k in range(space.n_karma):
                for c in np.flatnonzero(feas[k]):
                    assert vf.action_values[0, u, k, c] == pytest.approx(
                        payoffs[0, u, c], abs=1e-12
                    )

    def test_q_v_consistency_best_response_improves(self, rng):
        for _ in range(4):
            cfg = random_economy(rng)
            space = build_state_space(cfg)
            social = random_social_state(rng, space)
            field = compute_field(space, social)
            for t in range(cfg.n_types):
                vf = value_iteration(space, social, field, t, tol=1e-10)
                q = np.where(np.isfinite(vf.action_values), vf.action_values, 0.0)
                pi_q = np.einsum("rukc,rukc->ruk", social.policy[t], q)
                best = np.max(
                    np.where(
                        space.feasible[:, None], vf.action_values, -np.inf
                    ),
                    axis=-1,
                )
                assert np.all(best - pi_q >= -1e-9)
                # policy evaluation fixed point: V equals the policy-weighted Q
                np.testing.assert_allclose(pi_q, vf.values, atol=1e-7)


class TestBestResponseSet:
    def test_unique_maximizer(self):
        q = np.array([-np.inf, 1.0, 0.5, 0.2])
        assert best_response_set(q) == [1]

    def test_exact_tie(self):
        q = np.array([0.3, 1.0, 1.0])
        assert best_response_set(q) == [1, 2]

    def test_tolerance_band(self):
        q = np.array([1.000, 0.995, 0.5])
        assert best_response_set(q, tie_tol=0.01) == [0, 1]
