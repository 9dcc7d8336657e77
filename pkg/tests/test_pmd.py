from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import softmax

from powr.env import EnvSpec, TransitionDataset, exact_dynamics, exhaustive_dataset, make_env, make_rng
from powr.errors import NumericalError
from powr.harness import collect, policy_table
from powr.kernels import Kernel
from powr.oracle import exact_q, exact_value_and_J, policy_iteration, TabularPolicy
from powr.pmd import PolicyWeights, SoftmaxPolicy, pmd_step, policy_probs, run_pmd, softmax_rows
from powr.worldmodel import fit

ONEHOT = Kernel("onehot")
STATES16 = np.arange(16.0)[:, None]


@pytest.fixture(scope="module")
def lake_model():
    return fit(exhaustive_dataset(make_env("gridworld4"), 3), ONEHOT, 1e-10, dedup=True)


def test_zero_weights_uniform(lake_model):
    pol = SoftmaxPolicy.from_weights(PolicyWeights.zeros(lake_model, 2.0))
    assert np.allclose(pol.probs(STATES16), 0.25, atol=1e-15)
    assert np.allclose(SoftmaxPolicy.uniform(3, 2)(np.array([0.1, 0.2])), 1 / 3)


def test_single_anchor_softmax():
    C = np.array([[1.7, 0.0, 0.0]])
    pol = SoftmaxPolicy(ONEHOT, np.array([[4.0]]), C, eta=0.5)
    expected = np.exp([0.85, 0, 0]) / np.exp([0.85, 0, 0]).sum()
    assert np.allclose(policy_probs(pol, [4.0]), expected, atol=1e-15)
    assert np.allclose(policy_probs(pol, [5.0]), 1 / 3)


@given(arrays(np.float64, (5, 4), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariant(logits, shift):
    p = softmax_rows(logits)
    assert np.max(np.abs(p - softmax_rows(logits + shift))) < 1e-12
    assert np.all(p > 0) and np.allclose(p.sum(1), 1.0, atol=1e-12, rtol=0)


def test_nan_weights_rejected():
    with pytest.raises(NumericalError):
        SoftmaxPolicy(ONEHOT, np.zeros((1, 1)), np.array([[np.nan, 0.0]]), 1.0)
    with pytest.raises(NumericalError):
        softmax_rows(np.array([[np.nan, 1.0]]))


def test_zero_rewards_keep_policy_uniform():
    env = make_env("gridworld4")
    states, actions, nxt, _, done, trunc = exhaustive_dataset(env, 3).columns()
    ds = TransitionDataset.from_arrays(env.spec, states, actions, nxt, np.zeros(len(actions)), done, trunc)
    m = fit(ds, ONEHOT, 1e-6)
    pol, records, w = run_pmd(m, 0.99, 3.0, 5)
    assert np.all(w.C == 0)
    assert np.allclose(pol.probs(STATES16), 0.25)
    assert all(r.c_inf == 0 for r in records)


def test_one_step_matches_exact_update_on_chain():
    env = make_env("chain")
    mdp = exact_dynamics(env)
    m = fit(exhaustive_dataset(env), ONEHOT, 1e-10)
    eta = 0.7
    w, _ = pmd_step(PolicyWeights.zeros(m, eta), m, mdp.gamma)
    uniform = np.full((2, 2), 0.5)
    expected = softmax(eta * exact_q(mdp, uniform), axis=1)
    got = SoftmaxPolicy.from_weights(w).probs(np.arange(2.0)[:, None])
    assert np.max(np.abs(got - expected)) < 1e-5


def test_two_steps_cumulative_equals_recursive(lake_model):
    eta, gamma = 1.3, 0.99
    w0 = PolicyWeights.zeros(lake_model, eta)
    w1, q0 = pmd_step(w0, lake_model, gamma)
    w2, q1 = pmd_step(w1, lake_model, gamma)
    direct = softmax_rows(eta * (q0.values(STATES16) + q1.values(STATES16)))
    assert np.max(np.abs(SoftmaxPolicy.from_weights(w2).probs(STATES16) - direct)) < 1e-10
    assert w2.t == 2


def test_scatter_add_update(lake_model):
    w1, q = pmd_step(PolicyWeights.zeros(lake_model, 1.0), lake_model, 0.9)
    expected = np.zeros_like(w1.C)
    for i, a in enumerate(lake_model.anchor_actions):
        expected[i, a] += q.c[i]
    assert np.array_equal(w1.C, expected)


def test_mismatched_weights_rejected(lake_model):
    with pytest.raises(ValueError):
        PolicyWeights(np.zeros((3, 4)), 1.0, lake_model)
    with pytest.raises(ValueError):
        PolicyWeights(np.zeros((lake_model.n, 4)), -1.0, lake_model)


def test_run_pmd_T1_equals_pmd_step(lake_model):
    pol, records, w = run_pmd(lake_model, 0.95, 2.0, 1)
    w_step, _ = pmd_step(PolicyWeights.zeros(lake_model, 2.0), lake_model, 0.95)
    assert np.array_equal(w.C, w_step.C) and len(records) == 1


def test_run_pmd_T0_and_negative(lake_model):
    pol, records, _ = run_pmd(lake_model, 0.95, 2.0, 0)
    assert records == [] and np.allclose(pol.probs(STATES16), 0.25)
    with pytest.raises(ValueError):
        run_pmd(lake_model, 0.95, 2.0, -1)


def test_diagnostics_jsonl(lake_model, tmp_path):
    path = tmp_path / "diag.jsonl"
    _, records, _ = run_pmd(lake_model, 0.99, 1.0, 7, diagnostics_path=path,
                            epsilon_fn=lambda w, q: 0.5)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == len(records) == 7
    assert [r["t"] for r in rows] == list(range(7))
    assert {"c_inf", "spectral_radius", "wall_time", "epsilon", "saturated"} <= set(rows[0])
    assert rows[0]["epsilon"] == 0.5


def test_saturation_flag(lake_model):
    _, records, _ = run_pmd(lake_model, 0.99, 500.0, 3)
    assert records[-1].saturated and records[-1].logit_spread > 30
    _, records, _ = run_pmd(lake_model, 0.99, 0.01, 3)
    assert not records[-1].saturated


def test_exhaustive_lake_reaches_optimum(lake_mdp, lake_model):
    star, _ = policy_iteration(lake_mdp)
    _, J_star = exact_value_and_J(lake_mdp, TabularPolicy.deterministic(star, 4))
    pol, _, _ = run_pmd(lake_model, lake_mdp.gamma, 10.0, 50)
    _, J = exact_value_and_J(lake_mdp, pol.probs(STATES16))
    assert J_star - J < 1e-3


def test_strictly_positive_policies(lake_model):
    w = PolicyWeights.zeros(lake_model, 1.0)
    for _ in range(30):
        w, _ = pmd_step(w, lake_model, 0.99)
        assert SoftmaxPolicy.from_weights(w).probs(STATES16).min() > 0


def test_inexact_improvement_bound(lake, lake_mdp):
    ds = TransitionDataset(lake.spec)
    collect(lake, SoftmaxPolicy.uniform(4), 3000, make_rng(8), ds, epsilon=1.0)
    m = fit(ds, ONEHOT, 1e-6, dedup=True)
    gamma = lake_mdp.gamma
    w = PolicyWeights.zeros(m, 1.0)
    live = ~lake_mdp.terminal
    for _ in range(10):
        table = policy_table(SoftmaxPolicy.from_weights(w), lake)
        _, J = exact_value_and_J(lake_mdp, table)
        w_next, q = pmd_step(w, m, gamma)
        eps = np.max(np.abs(q.values(STATES16) - exact_q(lake_mdp, table))[live])
        _, J_next = exact_value_and_J(lake_mdp, policy_table(SoftmaxPolicy.from_weights(w_next), lake))
        assert J_next >= J - 2 * eps / (1 - gamma)
        w = w_next


def test_policy_save_load(tmp_path, lake_model):
    pol, _, _ = run_pmd(lake_model, 0.9, 1.0, 3)
    pol.save(tmp_path / "p.npz", env="gridworld4")
    back, meta = SoftmaxPolicy.load(tmp_path / "p.npz")
    assert meta == {"env": "gridworld4"}
    assert np.array_equal(back.probs(STATES16), pol.probs(STATES16))


def test_continuous_policy_on_laplacian(rng):
    spec = EnvSpec("box", 3, 10, 0.9, 0.0, low=(-1.0, -1.0), high=(1.0, 1.0))
    x = rng.uniform(-1, 1, size=(30, 2))
    ds = TransitionDataset.from_arrays(spec, x, rng.integers(3, size=30), np.clip(x * 0.8, -1, 1),
                                       rng.uniform(size=30), np.zeros(30, bool))
    m = fit(ds, Kernel("laplacian", 0.5), 1e-4)
    pol, records, _ = run_pmd(m, 0.9, 1.0, 5)
    p = pol(np.array([0.2, -0.3]))
    assert p.shape == (3,) and abs(p.sum() - 1) < 1e-12 and np.all(p > 0)
    assert all(r.spectral_radius < 1 / 0.9 for r in records)
