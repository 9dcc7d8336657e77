"""Numerical identity suite backing ``powr verify`` and the acceptance tests.

Every check returns the largest residual it saw; a check passes when that
residual is below its tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import EnvSpec, TransitionDataset, exhaustive_dataset, make_env, make_rng
from .kernels import Kernel
from .oracle import (
    TabularMDP,
    check_inverse_swap,
    check_markov_facts,
    check_performance_difference,
    check_simulation_lemma,
    policy_operator,
    random_mdp,
    random_policy,
)
from .pmd import SoftmaxPolicy, pmd_step, run_pmd
from .worldmodel import estimate_q, fit


@dataclass
class CheckResult:
    name: str
    residual: float
    tol: float
    count: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual < self.tol)


def _random_size(rng) -> tuple[int, int]:
    return int(rng.integers(2, 9)), int(rng.integers(2, 5))


def _perturbed_transfer(rng, mdp: TabularMDP, scale: float) -> np.ndarray:
    """A stochastic transfer matrix within ``scale`` (total variation per row) of the true one."""
    T = mdp.P.reshape(-1, mdp.n_states)
    other = rng.dirichlet(np.ones(mdp.n_states), size=T.shape[0])
    return (1.0 - scale) * T + scale * other


def operator_identities(seed: int = 0, count: int = 100) -> list[CheckResult]:
    """Performance difference, simulation lemma (plain and reward-perturbed),
    inverse swap and the Markov/Neumann facts on ``count`` random MDPs."""
    worst = dict(perf=0.0, sim=0.0, sim_reward=0.0, swap=0.0, markov=0.0)
    for i in range(count):
        rng = make_rng(seed, i)
        nx, na = _random_size(rng)
        mdp = random_mdp(rng, nx, na)
        p1, p2 = random_policy(rng, nx, na), random_policy(rng, nx, na)
        worst["perf"] = max(worst["perf"], check_performance_difference(mdp, p1, p2))
        T1 = _perturbed_transfer(rng, mdp, rng.uniform(0.0, 0.5))
        r1 = mdp.r + rng.normal(scale=0.1, size=mdp.r.shape)
        sim = check_simulation_lemma(mdp, T1, p1, perturbed_r=r1)
        worst["sim"] = max(worst["sim"], sim["plain"])
        worst["sim_reward"] = max(worst["sim_reward"], sim["reward"])
        m, k = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        A = rng.normal(scale=0.3, size=(m, k))
        B = rng.normal(scale=0.3, size=(k, m))
        worst["swap"] = max(worst["swap"], check_inverse_swap(A, B))
        facts = check_markov_facts(mdp, p1, f=rng.uniform(0, 1, nx), nu=rng.exponential(size=nx))
        worst["markov"] = max(worst["markov"], max(facts.values()))
    names = dict(perf="performance difference", sim="simulation lemma", sim_reward="simulation lemma (reward)",
                 swap="inverse swap", markov="markov/neumann facts")
    return [CheckResult(names[k], v, 1e-10, count) for k, v in worst.items()]


def _tabular_sample(rng, mdp: TabularMDP, n: int) -> TransitionDataset:
    nx, na = mdp.n_states, mdp.n_actions
    x = rng.integers(nx, size=n)
    a = rng.integers(na, size=n)
    x2 = np.array([rng.choice(nx, p=mdp.P[s, b]) for s, b in zip(x, a)])
    spec = EnvSpec("random", na, 1, mdp.gamma, 0.0, n_states=nx)
    return TransitionDataset.from_arrays(spec, x, a, x2, mdp.r[x, a], np.zeros(n, bool))


def operator_form_q(dataset: TransitionDataset, n_states: int, n_actions: int, lam: float, gamma: float,
                    policy: np.ndarray) -> np.ndarray:
    """Action values from the explicit feature-space operators (one-hot features).

    Ridge regressions in the ``|X||A|``-dimensional feature space give the
    transfer matrix ``B`` and reward ``r``; then ``q = (I - gamma B P_pi)^{-1} r``.
    """
    states, actions, next_states, rewards, _, _ = dataset.columns()
    n = len(actions)
    Z = np.zeros((n, n_states * n_actions))
    Z[np.arange(n), states[:, 0].astype(int) * n_actions + actions] = 1.0
    Psi = np.zeros((n, n_states))
    Psi[np.arange(n), next_states[:, 0].astype(int)] = 1.0
    G = Z.T @ Z + n * lam * np.eye(Z.shape[1])
    B = np.linalg.solve(G, Z.T @ Psi)
    r = np.linalg.solve(G, Z.T @ rewards)
    A = np.eye(Z.shape[1]) - gamma * B @ policy_operator(policy)
    return np.linalg.solve(A, r).reshape(n_states, n_actions)


def kernel_trick(seed: int = 0, count: int = 50) -> CheckResult:
    """Gram-matrix action values against the explicit operator form on random tabular data."""
    worst = 0.0
    onehot = Kernel("onehot")
    for i in range(count):
        rng = make_rng(seed, 1000 + i)
        nx, na = _random_size(rng)
        mdp = random_mdp(rng, nx, na)
        pi = random_policy(rng, nx, na)
        lam = 10.0 ** rng.uniform(-4, -1)
        ds = _tabular_sample(rng, mdp, int(rng.integers(5, 60)))
        model = fit(ds, onehot, lam, use_sparse=False)
        q_gram = estimate_q(model, pi[model.evolved_states[:, 0].astype(int)], mdp.gamma, guard=False)
        q_hat = q_gram.values(np.arange(nx, dtype=float)[:, None])
        q_op = operator_form_q(ds, nx, na, lam, mdp.gamma, pi)
        worst = max(worst, float(np.max(np.abs(q_hat - q_op))))
    return CheckResult("kernel trick (gram vs operator form)", worst, 1e-8, count)


def update_paths(T: int = 50, eta: float = 1.0, lam: float = 1e-6) -> CheckResult:
    """Multiplicative policy updates against the accumulated-coefficient softmax on the lake.

    Path one keeps a policy table and multiplies it by ``exp(eta q_hat)`` each
    step, with ``q_hat`` estimated from that table.  Path two runs ``run_pmd``.
    """
    env = make_env("gridworld4")
    model = fit(exhaustive_dataset(env, 3), Kernel("onehot"), lam, dedup=True)
    all_states = np.arange(env.spec.n_states, dtype=float)[:, None]
    evolved = model.evolved_states[:, 0].astype(int)
    gamma = env.spec.gamma
    table = np.full((env.spec.n_states, env.spec.action_count), 1.0 / env.spec.action_count)
    _, _, weights = run_pmd(model, gamma, eta, 0)
    worst = 0.0
    for _ in range(T):
        q = estimate_q(model, table[evolved], gamma).values(all_states)
        table = table * np.exp(eta * (q - q.max(1, keepdims=True)))
        table /= table.sum(1, keepdims=True)
        weights, _ = pmd_step(weights, model, gamma)
        probs = SoftmaxPolicy.from_weights(weights).probs(all_states)
        worst = max(worst, float(np.max(np.abs(probs - table))))
    return CheckResult("multiplicative vs softmax path", worst, 1e-10, T)


def run_all(seed: int = 0) -> list[CheckResult]:
    return operator_identities(seed) + [kernel_trick(seed), update_paths()]


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max residual':>12}  {'tol':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.residual:12.3e}  {r.tol:7.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
