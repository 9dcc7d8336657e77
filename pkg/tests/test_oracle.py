from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from powr.env import make_env, make_rng, exact_dynamics
from powr.oracle import (
    MAX_SIZE,
    TabularMDP,
    TabularPolicy,
    check_inverse_swap,
    check_markov_facts,
    check_performance_difference,
    check_simulation_lemma,
    exact_pmd,
    exact_q,
    exact_value_and_J,
    finite_horizon_value,
    policy_iteration,
    random_mdp,
    random_policy,
    state_visitation,
    transfer_matrix,
)

seeds = st.integers(0, 2**32 - 1)


def absorbing(gamma=0.5):
    return TabularMDP(np.ones((1, 1, 1)), np.ones((1, 1)), gamma, np.ones(1))


def test_single_absorbing_state():
    assert exact_q(absorbing(), TabularPolicy.uniform(1, 1))[0, 0] == pytest.approx(2.0, abs=1e-15)


def test_gamma_zero_q_is_reward(rng):
    mdp = random_mdp(rng, 4, 3, gamma=0.0)
    assert np.allclose(exact_q(mdp, random_policy(rng, 4, 3)), mdp.r, atol=1e-15)


def test_neumann_sum_oracle(rng):
    mdp = random_mdp(rng, 3, 2, gamma=0.9)
    pi = random_policy(rng, 3, 2)
    T = transfer_matrix(mdp)
    Ppi = np.zeros((3, 6))
    for x in range(3):
        Ppi[x, 2 * x:2 * x + 2] = pi[x]
    total, term = np.zeros(6), mdp.r.reshape(-1).copy()
    for _ in range(100_000):
        total += term
        term = mdp.gamma * T @ (Ppi @ term)
        if np.abs(term).max() < 1e-18:
            break
    assert np.max(np.abs(exact_q(mdp, pi).reshape(-1) - total)) < 1e-8


def test_symmetric_two_state_J():
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    mdp = TabularMDP(P, np.array([[1.0], [1.0]]), 0.9, np.array([0.5, 0.5]))
    v, J = exact_value_and_J(mdp, TabularPolicy.uniform(2, 1))
    assert J == pytest.approx(v[0]) and v[0] == pytest.approx(v[1])


@given(seeds)
def test_nonneg_rewards_nonneg_J(seed):
    rng = make_rng(seed)
    mdp = random_mdp(rng, 5, 3)
    v, J = exact_value_and_J(mdp, random_policy(rng, 5, 3))
    assert J >= 0 and np.all(v >= 0)


def test_J_matches_monte_carlo():
    rng = make_rng(21)
    mdp = random_mdp(rng, 4, 2, gamma=0.7)
    pi = random_policy(rng, 4, 2)
    _, J = exact_value_and_J(mdp, pi)
    episodes, horizon = 100_000, 60
    x = rng.choice(4, size=episodes, p=mdp.nu)
    ret = np.zeros(episodes)
    cum_pi = np.cumsum(pi, axis=1)
    cum_P = np.cumsum(mdp.P, axis=2)
    for t in range(horizon):
        a = (rng.random(episodes)[:, None] > cum_pi[x]).sum(1)
        ret += mdp.gamma ** t * mdp.r[x, a]
        x = np.minimum((rng.random(episodes)[:, None] > cum_P[x, a]).sum(1), 3)
    se = ret.std() / np.sqrt(episodes)
    assert abs(ret.mean() - J) < 3 * se + mdp.gamma ** horizon / (1 - mdp.gamma)


def test_visitation_matches_monte_carlo():
    rng = make_rng(22)
    mdp = random_mdp(rng, 4, 2, gamma=0.6)
    pi = random_policy(rng, 4, 2)
    d = state_visitation(mdp, pi)
    episodes, horizon = 100_000, 40
    x = rng.choice(4, size=episodes, p=mdp.nu)
    occ = np.zeros(4)
    cum_pi, cum_P = np.cumsum(pi, axis=1), np.cumsum(mdp.P, axis=2)
    for t in range(horizon):
        occ += (1 - mdp.gamma) * mdp.gamma ** t * np.bincount(x, minlength=4) / episodes
        a = np.minimum((rng.random(episodes)[:, None] > cum_pi[x]).sum(1), 1)
        x = np.minimum((rng.random(episodes)[:, None] > cum_P[x, a]).sum(1), 3)
    assert 0.5 * np.abs(occ - d).sum() < 0.01


@given(seeds)
def test_visitation_is_distribution(seed):
    rng = make_rng(seed)
    mdp = random_mdp(rng, 6, 3)
    d = state_visitation(mdp, random_policy(rng, 6, 3))
    assert np.all(d >= -1e-15) and abs(d.sum() - 1) < 1e-10


def test_visitation_limits(rng):
    mdp = random_mdp(rng, 4, 2, gamma=1e-12)
    assert np.allclose(state_visitation(mdp, random_policy(rng, 4, 2)), mdp.nu, atol=1e-10)
    P = np.zeros((3, 2, 3))
    P[0, :, 0] = 1.0
    P[1:, :, 1] = 1.0
    mdp = TabularMDP(P, np.zeros((3, 2)), 0.9, np.array([1.0, 0.0, 0.0]))
    assert np.allclose(state_visitation(mdp, TabularPolicy.uniform(3, 2)), [1, 0, 0])


@given(seeds)
def test_performance_difference_random(seed):
    rng = make_rng(seed)
    mdp = random_mdp(rng, 4, 3)
    p1, p2 = random_policy(rng, 4, 3), random_policy(rng, 4, 3)
    assert check_performance_difference(mdp, p1, p2) < 1e-10
    assert check_performance_difference(mdp, p1, p1) < 1e-13


def test_performance_difference_deterministic_chain():
    mdp = exact_dynamics(make_env("chain"))
    a = TabularPolicy.deterministic([1, 1], 2)
    b = TabularPolicy.deterministic([0, 0], 2)
    assert check_performance_difference(mdp, a, b) < 1e-12


@given(seeds, st.floats(0.0, 1.0))
def test_simulation_lemma(seed, scale):
    rng = make_rng(seed)
    mdp = random_mdp(rng, 5, 2)
    pi = random_policy(rng, 5, 2)
    T = transfer_matrix(mdp)
    T1 = (1 - scale) * T + scale * rng.dirichlet(np.ones(5), size=10)
    res = check_simulation_lemma(mdp, T1, pi, perturbed_r=mdp.r + rng.normal(size=mdp.r.shape))
    assert res["plain"] < 1e-10 and res["reward"] < 1e-10


def test_simulation_lemma_identical_operator(rng):
    mdp = random_mdp(rng, 4, 2)
    res = check_simulation_lemma(mdp, transfer_matrix(mdp), random_policy(rng, 4, 2))
    assert res == {"plain": 0.0, "reward": 0.0}


def test_simulation_lemma_reward_only(rng):
    mdp = random_mdp(rng, 4, 2)
    pi = random_policy(rng, 4, 2)
    r1 = mdp.r + 0.3
    res = check_simulation_lemma(mdp, transfer_matrix(mdp), pi, perturbed_r=r1)
    assert res["reward"] < 1e-12
    # with T unchanged the difference is exactly 0.3 / (1 - gamma)
    q1 = exact_q(TabularMDP(mdp.P, r1, mdp.gamma, mdp.nu), pi)
    assert np.allclose(q1 - exact_q(mdp, pi), 0.3 / (1 - mdp.gamma))


@given(seeds, st.integers(1, 8), st.integers(1, 8))
def test_inverse_swap(seed, m, k):
    rng = make_rng(seed)
    A, B = rng.normal(scale=0.3, size=(m, k)), rng.normal(scale=0.3, size=(k, m))
    assert check_inverse_swap(A, B) < 1e-10


@given(seeds)
def test_markov_facts(seed):
    rng = make_rng(seed)
    mdp = random_mdp(rng, 6, 3)
    facts = check_markov_facts(mdp, random_policy(rng, 6, 3), f=rng.uniform(size=6), nu=rng.dirichlet(np.ones(6)))
    assert max(facts.values()) < 1e-10


def test_policy_iteration_lowest_index_ties():
    P = np.zeros((1, 3, 1))
    P[:, :, 0] = 1.0
    mdp = TabularMDP(P, np.array([[0.0, 1.0, 1.0]]), 0.9, np.ones(1))
    actions, q = policy_iteration(mdp)
    assert actions.tolist() == [1]
    assert q[0, 1] == pytest.approx(10.0)


def test_exact_pmd_lake(lake_mdp):
    policies, gaps = exact_pmd(lake_mdp, 5.0, 100)
    assert np.allclose(policies[0], 0.25)
    assert gaps[100] < 1e-3
    assert np.all(np.diff(gaps) <= 1e-10)  # J increases monotonically


@given(seeds, st.floats(0.1, 5.0))
def test_exact_pmd_monotone_random(seed, eta):
    mdp = random_mdp(make_rng(seed), 5, 3)
    _, gaps = exact_pmd(mdp, eta, 15)
    assert np.all(np.diff(gaps) <= 1e-10) and gaps.min() >= -1e-10


def test_lake_finite_horizon_ceiling(lake):
    mdp = exact_dynamics(lake)
    assert finite_horizon_value(mdp, 100)[0] == pytest.approx(0.7442, abs=1e-4)


def test_oracle_size_cap():
    n = int(np.sqrt(MAX_SIZE)) + 2
    mdp = random_mdp(make_rng(0), n * 2, n // 2 + 1)
    with pytest.raises(ValueError):
        exact_q(mdp, TabularPolicy.uniform(mdp.n_states, mdp.n_actions))


@pytest.mark.parametrize("bad", [np.array([[0.5, 0.6]]), np.array([[-0.1, 1.1]])])
def test_policy_validation(bad):
    with pytest.raises(ValueError):
        TabularPolicy(bad)


def test_mdp_validation():
    with pytest.raises(ValueError):
        TabularMDP(np.full((2, 1, 2), 0.4), np.zeros((2, 1)), 0.9, np.array([0.5, 0.5]))
