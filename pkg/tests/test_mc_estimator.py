import logging
import math

import numpy as np
import pytest
from scipy.stats import binom

from src.algorithms.mc_estimator import (
    MAX_BRANCH_WIDTH,
    EstimatorParams,
    GenerativeModel,
    MonteCarloQEstimator,
    all_pairs,
    estimate_q_h,
    estimation_error_bound,
    iterations_for_accuracy,
    params_for_accuracy,
    predicted_samples,
    rollout_value,
)
from src.algorithms.mdp_core import bellman_expected, lookahead_values, policy_eval_exact
from src.envs.generative import TabularGenerativeModel
from src.envs.random_mdp import build_chain_mdp, build_random_mdp
from src.models.tabular import Policy, TabularMdp
from src.utils.errors import InvalidModelError


def single_state_model(reward=1.0, discount=0.5):
    mdp = TabularMdp(transition=np.ones((1, 1, 1)), reward=np.array([[reward]]), discount=discount)
    return TabularGenerativeModel(mdp)


def truncated_values(mdp, policy, horizon):
    v = np.zeros(mdp.n_states)
    for _ in range(horizon):
        v = bellman_expected(mdp, policy, v)
    return v


class TestRollout:
    def test_single_state_geometric(self, rng):
        model = single_state_model()
        for m0 in (1, 7):
            assert rollout_value(model, Policy.uniform(1, 1), 0, m0, 3, rng) == pytest.approx(1.75)

    def test_zero_reward(self, rng):
        model = single_state_model(reward=0.0)
        assert rollout_value(model, Policy.uniform(1, 1), 0, 5, 10, rng) == 0.0

    def test_deterministic_chain_by_hand(self, rng):
        model = TabularGenerativeModel(build_chain_mdp(2, discount=0.5, left_reward=0.0, right_reward=1.0))
        always_right = Policy.deterministic([1, 1], 2)
        # 0 -> 1 pays nothing, then 1 -> 1 pays 1 at every later step
        assert rollout_value(model, always_right, 0, 3, 4, rng) == pytest.approx(0.5 + 0.25 + 0.125)

    def test_rejects_zero_counts(self, rng):
        with pytest.raises(InvalidModelError):
            rollout_value(single_state_model(), Policy.uniform(1, 1), 0, 0, 3, rng)


class TestEstimateQh:
    def test_generative_model_protocol(self, small_mdp):
        assert isinstance(TabularGenerativeModel(small_mdp), GenerativeModel)

    def test_deterministic_mdp_matches_exact(self):
        mdp = build_chain_mdp(6, discount=0.8)
        model = TabularGenerativeModel(mdp)
        policy = Policy.deterministic([1, 0, 1, 1, 0, 1], 2)
        params = EstimatorParams.uniform(h=1, m=1, m_leaf=1, horizon=150)
        estimate = estimate_q_h(model, policy, all_pairs(6, 2), params)
        _, q = lookahead_values(mdp, policy, 1)
        bias = 0.8 ** 151 / 0.2
        np.testing.assert_allclose(estimate.as_table(6, 2), q, atol=bias + 1e-12)

    def test_single_action_targets_q_pi(self):
        mdp = build_random_mdp(3, 1, seed=4, discount=0.7)
        policy = Policy.uniform(3, 1)
        params = EstimatorParams.uniform(h=3, m=400, m_leaf=400, horizon=60, rng_seed=5)
        estimate = estimate_q_h(TabularGenerativeModel(mdp), policy, all_pairs(3, 1), params)
        _, q_pi = lookahead_values(mdp, policy, 1)
        bound = estimation_error_bound(0.7, 3, 1, estimate.layer_sizes[0], params, delta=0.01, c_size=3)
        assert np.max(np.abs(estimate.as_table(3, 1) - q_pi)) <= bound

    def test_deterministic_given_seed(self, small_mdp):
        model = TabularGenerativeModel(small_mdp)
        params = EstimatorParams.uniform(h=2, m=5, m_leaf=4, horizon=10, rng_seed=99)
        queries = all_pairs(5, 3)
        first = estimate_q_h(model, Policy.uniform(5, 3), queries, params)
        second = estimate_q_h(model, Policy.uniform(5, 3), list(reversed(queries)), params)
        assert first.q_hat == second.q_hat
        assert first.samples_used == second.samples_used
        other = estimate_q_h(model, Policy.uniform(5, 3), queries, params.with_seed(100))
        assert other.q_hat != first.q_hat

    def test_iteration_changes_streams(self, small_mdp):
        estimator = MonteCarloQEstimator(TabularGenerativeModel(small_mdp),
                                         EstimatorParams.uniform(h=1, m=3, m_leaf=3, horizon=5))
        policy = Policy.uniform(5, 3)
        assert estimator.estimate(policy, 0).q_hat != estimator.estimate(policy, 1).q_hat

    def test_values_clamped(self, small_mdp):
        params = EstimatorParams.uniform(h=2, m=3, m_leaf=2, horizon=20)
        estimate = estimate_q_h(TabularGenerativeModel(small_mdp), Policy.uniform(5, 3), all_pairs(5, 3), params)
        values = np.array(list(estimate.q_hat.values()))
        assert np.all(values >= 0) and np.all(values <= 1 / (1 - small_mdp.discount))

    @pytest.mark.parametrize("h, m, m_leaf, horizon, queries", [
        (1, 4, 3, 7, [(0, 0)]),
        (2, 3, 2, 5, [(0, 1), (3, 2)]),
        (3, 2, 5, 4, None),
    ])
    def test_sample_ledger(self, small_mdp, h, m, m_leaf, horizon, queries):
        params = EstimatorParams.uniform(h=h, m=m, m_leaf=m_leaf, horizon=horizon, rng_seed=3)
        queries = all_pairs(5, 3) if queries is None else queries
        estimate = estimate_q_h(TabularGenerativeModel(small_mdp), Policy.uniform(5, 3), queries, params)
        assert estimate.rollout_samples == m_leaf * horizon * estimate.layer_sizes[0]
        assert estimate.samples_used == estimate.expected_samples(params)
        assert estimate.nodes_per_level[h] == len(set(queries))

    def test_full_queries_within_prediction(self, small_mdp):
        params = EstimatorParams.uniform(h=2, m=4, m_leaf=3, horizon=6)
        estimate = estimate_q_h(TabularGenerativeModel(small_mdp), Policy.uniform(5, 3), all_pairs(5, 3), params)
        assert estimate.samples_used <= predicted_samples(params, 5, 3, 1)
        assert estimate.rollout_samples <= 3 * 6 * 5

    def test_params_validation(self):
        with pytest.raises(InvalidModelError):
            EstimatorParams(h=2, m_leaf=1, m_branch=(1,), horizon=1)
        with pytest.raises(InvalidModelError):
            EstimatorParams.uniform(h=1, m=0, m_leaf=1, horizon=1)

    @pytest.mark.slow
    def test_h1_expectation(self):
        transition = np.array([[[0.3, 0.7], [0.9, 0.1]], [[0.5, 0.5], [0.2, 0.8]]])
        mdp = TabularMdp(transition=transition, reward=np.array([[0.2, 0.6], [1.0, 0.1]]), discount=0.8)
        policy = Policy(np.array([[0.4, 0.6], [0.5, 0.5]]))
        horizon = 20
        model = TabularGenerativeModel(mdp)
        samples = np.array([
            estimate_q_h(model, policy, [(0, 1)], EstimatorParams.uniform(1, 1, 1, horizon, rng_seed=seed)).q_hat[(0, 1)]
            for seed in range(10_000)
        ])
        expected = mdp.reward[0, 1] + 0.8 * mdp.transition[0, 1] @ truncated_values(mdp, policy, horizon)
        standard_error = samples.std(ddof=1) / math.sqrt(samples.size)
        assert abs(samples.mean() - expected) <= 3 * standard_error

    @pytest.mark.slow
    def test_error_shrinks_with_widths(self):
        mdp = build_random_mdp(3, 2, seed=8, discount=0.9)
        policy = Policy.uniform(3, 2)
        model = TabularGenerativeModel(mdp)
        _, q_h = lookahead_values(mdp, policy, 2)
        means = []
        for m in (25, 50, 100, 200):
            errors = [np.max(np.abs(estimate_q_h(model, policy, all_pairs(3, 2),
                                                 EstimatorParams.uniform(2, m, m, 100, rng_seed=seed))
                                    .as_table(3, 2) - q_h)) for seed in range(50)]
            means.append(np.mean(errors))
        assert all(later <= earlier for earlier, later in zip(means, means[1:]))

    @pytest.mark.slow
    def test_concentration_bound_holds(self):
        mdp = build_random_mdp(5, 2, seed=0, discount=0.9)
        policy = Policy.uniform(5, 2)
        model = TabularGenerativeModel(mdp)
        _, q_h = lookahead_values(mdp, policy, 2)
        queries = all_pairs(5, 2)
        hits = 0
        trials = 200
        for seed in range(trials):
            params = EstimatorParams.uniform(h=2, m=2000, m_leaf=2000, horizon=200, rng_seed=seed)
            estimate = estimate_q_h(model, policy, queries, params)
            bound = estimation_error_bound(0.9, 2, 2, estimate.layer_sizes[0], params, delta=0.05,
                                           c_size=len(queries))
            hits += np.max(np.abs(estimate.as_table(5, 2) - q_h)) <= bound
        # reject "holds with probability >= 0.95" only at the 1% level
        assert binom.cdf(hits, trials, 0.95) > 0.01


class TestParamsForAccuracy:
    def test_horizon_formula(self):
        params = params_for_accuracy(0.9, 1, 0.1, 0.1, n_actions=2, c_size=4)
        b = 0.1 * 0.1 * 0.1 / 4
        assert b == pytest.approx(2.5e-4)
        x = math.log(3 * 0.9 / (b * 0.1)) / 0.1
        assert params.horizon == math.floor(x) + 1

    def test_huge_epsilon_floors_at_one(self):
        params = params_for_accuracy(0.9, 2, 1e12, 0.1, n_actions=2, c_size=4)
        assert params.m_leaf == 1 and params.horizon == 1 and params.m_branch == (1, 1)

    def test_fixed_point_is_minimal(self):
        gamma, h, eps, delta, n_actions, c_size = 0.5, 2, 1.0, 0.1, 2, 8
        params = params_for_accuracy(gamma, h, eps, delta, n_actions, c_size)
        m = params.m_branch[0]
        b = eps * (1 - gamma) * (1 - gamma ** h) / 4
        coef = 9 * gamma ** 4 * (1 - gamma ** (h - 1)) ** 2 / ((1 - gamma) ** 4 * b ** 2)

        def bound(width):
            return coef * (math.log(2 * h * n_actions * c_size / (delta / 2))
                           + h * math.log(n_actions) + h * math.log(width))

        assert m > bound(m)
        assert m - 1 <= bound(m)
        assert m < MAX_BRANCH_WIDTH

    def test_cap_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            params = params_for_accuracy(0.99, 5, 0.5, 0.05, n_actions=2, c_size=10)
        assert params.m_branch[0] == MAX_BRANCH_WIDTH
        assert any("capping" in record.message for record in caplog.records)

    @pytest.mark.parametrize("eps, delta", [(0.0, 0.1), (-1.0, 0.1), (0.1, 0.0), (0.1, 1.0)])
    def test_rejects_bad_targets(self, eps, delta):
        with pytest.raises(InvalidModelError):
            params_for_accuracy(0.9, 1, eps, delta, 2, 4)

    def test_iterations_for_accuracy(self):
        k = iterations_for_accuracy(0.9, 2, 0.1)
        x = math.log(4 / (0.1 * 0.1 * 0.19)) / (2 * 0.1)
        assert k == math.floor(x) + 1

    def test_predicted_samples(self):
        params = EstimatorParams.uniform(h=2, m=3, m_leaf=4, horizon=5)
        assert predicted_samples(params, 10, 2, 7) == 7 * (4 * 5 * 10 + 6 * 10 * 2)


def test_policy_evaluation_reference_is_consistent(small_mdp):
    policy = Policy.uniform(5, 3)
    v_long = truncated_values(small_mdp, policy, 400)
    np.testing.assert_allclose(v_long, policy_eval_exact(small_mdp, policy), atol=1e-12)
