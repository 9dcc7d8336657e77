"""Exact tabular linear algebra: action values, visitation, exact PMD and operator identities.

Operators act on flattened tables.  ``T`` is the ``|X||A| x |X|`` transfer
matrix (``P`` reshaped), ``P_pi`` the ``|X| x |X||A|`` policy operator
``(P_pi g)(x) = sum_a pi(a|x) g(x, a)``.  Dense solves only; the oracle is
meant for validation on small MDPs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import TabularMDP

MAX_SIZE = 5000

__all__ = [
    "TabularMDP", "TabularPolicy", "transfer_matrix", "policy_operator", "exact_q", "exact_value_and_J",
    "state_visitation", "check_performance_difference", "check_simulation_lemma", "check_inverse_swap",
    "check_markov_facts", "policy_iteration", "exact_pmd", "random_mdp", "random_policy",
    "finite_horizon_value",
]


@dataclass
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if np.any(self.probs < 0) or not np.allclose(self.probs.sum(1), 1.0, atol=1e-10, rtol=0):
            raise ValueError("policy rows must be probability vectors")

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions):
        actions = np.asarray(actions)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)


def _probs(policy) -> np.ndarray:
    return policy.probs if isinstance(policy, TabularPolicy) else np.asarray(policy, dtype=float)


def _check_size(mdp: TabularMDP):
    if mdp.n_states * mdp.n_actions > MAX_SIZE:
        raise ValueError(f"oracle is capped at |X||A| <= {MAX_SIZE}")


def transfer_matrix(mdp: TabularMDP) -> np.ndarray:
    return mdp.P.reshape(mdp.n_states * mdp.n_actions, mdp.n_states)


def policy_operator(policy, n_states=None, n_actions=None) -> np.ndarray:
    pi = _probs(policy)
    nx, na = pi.shape
    out = np.zeros((nx, nx * na))
    for x in range(nx):
        out[x, x * na:(x + 1) * na] = pi[x]
    return out


def _q_general(T, P_pi, r, gamma) -> np.ndarray:
    n = T.shape[0]
    return np.linalg.solve(np.eye(n) - gamma * T @ P_pi, r)


def exact_q(mdp: TabularMDP, policy) -> np.ndarray:
    """``(I - gamma T P_pi)^{-1} r`` as an ``|X| x |A|`` table."""
    _check_size(mdp)
    q = _q_general(transfer_matrix(mdp), policy_operator(policy), mdp.r.reshape(-1), mdp.gamma)
    return q.reshape(mdp.n_states, mdp.n_actions)


def exact_value_and_J(mdp: TabularMDP, policy, q=None) -> tuple[np.ndarray, float]:
    q = exact_q(mdp, policy) if q is None else q
    v = np.sum(_probs(policy) * q, axis=1)
    return v, float(mdp.nu @ v)


def state_visitation(mdp: TabularMDP, policy, nu=None) -> np.ndarray:
    """Normalized discounted occupancy ``(1 - gamma) (I - gamma P_pi T)^{-*} nu``."""
    nu = mdp.nu if nu is None else nu
    A = np.eye(mdp.n_states) - mdp.gamma * policy_operator(policy) @ transfer_matrix(mdp)
    return (1.0 - mdp.gamma) * np.linalg.solve(A.T, nu)


def check_performance_difference(mdp: TabularMDP, policy1, policy2) -> float:
    """``|J1 - J2 - <(P1 - P2) q2, d1> / (1 - gamma)|``.

    The left-hand side comes from two independent value solves; the right-hand
    side from ``q2`` and the visitation of ``policy1``.
    """
    _, J1 = exact_value_and_J(mdp, policy1)
    _, J2 = exact_value_and_J(mdp, policy2)
    q2 = exact_q(mdp, policy2).reshape(-1)
    d1 = state_visitation(mdp, policy1)
    diff = (policy_operator(policy1) - policy_operator(policy2)) @ q2
    return abs((J1 - J2) - diff @ d1 / (1.0 - mdp.gamma))


def check_simulation_lemma(mdp: TabularMDP, perturbed_T: np.ndarray, policy, perturbed_r=None) -> dict:
    """Residuals of the simulation identity and its reward-perturbed form.

    With ``T1`` the perturbed operator, ``T2`` the true one:
    ``q(T1) - q(T2) = gamma (I - gamma T1 P)^{-1} (T1 - T2) v(T2)`` and, when a
    perturbed reward ``r1`` is given,
    ``q(T1, r1) - q(T2, r2) = (I - gamma T1 P)^{-1}(r1 - r2) + gamma (I - gamma T1 P)^{-1}(T1 - T2) v(T2, r2)``.
    """
    g = mdp.gamma
    T2, T1 = transfer_matrix(mdp), np.asarray(perturbed_T, dtype=float).reshape(transfer_matrix(mdp).shape)
    P = policy_operator(policy)
    r2 = mdp.r.reshape(-1)
    r1 = r2 if perturbed_r is None else np.asarray(perturbed_r, dtype=float).reshape(-1)
    n = len(r2)
    A1 = np.eye(n) - g * T1 @ P
    q2 = _q_general(T2, P, r2, g)
    v2 = P @ q2
    plain_lhs = _q_general(T1, P, r2, g) - q2
    plain_rhs = g * np.linalg.solve(A1, (T1 - T2) @ v2)
    out = {"plain": float(np.max(np.abs(plain_lhs - plain_rhs)))}
    lhs = _q_general(T1, P, r1, g) - q2
    rhs = np.linalg.solve(A1, r1 - r2) + plain_rhs
    out["reward"] = float(np.max(np.abs(lhs - rhs)))
    return out


def check_inverse_swap(A: np.ndarray, B: np.ndarray) -> float:
    """``max |(I + AB)^{-1} A - A (I + BA)^{-1}|``."""
    m, k = A.shape
    left = np.linalg.solve(np.eye(m) + A @ B, A)
    right = A @ np.linalg.inv(np.eye(k) + B @ A)
    return float(np.max(np.abs(left - right)))


def check_markov_facts(mdp: TabularMDP, policy, f=None, nu=None) -> dict:
    """Residuals/violations for the properties of ``(I - gamma P T)^{-1}``.

    ``markov_rows``: ``(1 - gamma) R`` has unit row sums and non-negative entries.
    ``dominates``: ``R f >= f`` for non-negative ``f`` (largest violation).
    ``tv_visitation`` / ``tv_policy``: total mass of a non-negative ``nu`` preserved by the adjoints.
    ``neumann_norm``: sup-norm of ``(I - gamma T P)^{-1}`` exceeds ``1/(1 - gamma)`` by this much.
    """
    g = mdp.gamma
    P = policy_operator(policy)
    T = transfer_matrix(mdp)
    R = np.linalg.inv(np.eye(mdp.n_states) - g * P @ T)
    f = np.ones(mdp.n_states) if f is None else f
    nu = mdp.nu if nu is None else nu
    out = {
        "markov_rows": float(max(np.max(np.abs((1 - g) * R.sum(1) - 1.0)), max(0.0, -np.min(R)))),
        "dominates": float(max(0.0, np.max(f - R @ f))),
        "tv_visitation": float(abs((1 - g) * np.abs(np.linalg.solve((np.eye(mdp.n_states) - g * P @ T).T, nu)).sum()
                                   - np.abs(nu).sum())),
        "tv_policy": float(abs(np.abs(P.T @ nu).sum() - np.abs(nu).sum())),
    }
    Q = np.linalg.inv(np.eye(T.shape[0]) - g * T @ P)
    out["neumann_norm"] = float(max(0.0, np.abs(Q).sum(1).max() - 1.0 / (1.0 - g)))
    return out


def policy_iteration(mdp: TabularMDP, max_iter: int = 10_000, tol: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Howard policy iteration.  Returns ``(greedy actions, optimal q)``.

    An action is replaced only when another one is better by more than
    ``tol``; among maximizers the lowest index wins.
    """
    nx, na = mdp.n_states, mdp.n_actions
    actions = np.zeros(nx, dtype=int)
    for _ in range(max_iter):
        pi = TabularPolicy.deterministic(actions, na)
        q = exact_q(mdp, pi)
        best = np.argmax(q, axis=1)
        current = q[np.arange(nx), actions]
        improve = q[np.arange(nx), best] > current + tol * np.maximum(1.0, np.abs(current))
        if not improve.any():
            return actions, q
        actions = np.where(improve, best, actions)
    raise RuntimeError("policy iteration did not terminate")


def exact_pmd(mdp: TabularMDP, eta: float, T: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Exact KL mirror descent ``pi_{t+1} ∝ pi_t exp(eta q_{pi_t})`` from the uniform policy.

    Returns the ``T + 1`` policies and the gaps ``J(pi*) - J(pi_t)``.
    """
    star, _ = policy_iteration(mdp)
    _, J_star = exact_value_and_J(mdp, TabularPolicy.deterministic(star, mdp.n_actions))
    logits = np.zeros((mdp.n_states, mdp.n_actions))
    policies, gaps = [], []
    for t in range(T + 1):
        z = logits - logits.max(1, keepdims=True)
        pi = np.exp(z)
        pi /= pi.sum(1, keepdims=True)
        q = exact_q(mdp, pi)
        _, J = exact_value_and_J(mdp, pi, q)
        policies.append(pi)
        gaps.append(J_star - J)
        logits = logits + eta * q
    return policies, np.array(gaps)


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, gamma: float | None = None,
               concentration: float = 1.0) -> TabularMDP:
    """Dirichlet transition rows, uniform [0, 1] rewards, Dirichlet start distribution."""
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    r = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    nu = rng.dirichlet(np.ones(n_states))
    gamma = rng.uniform(0.5, 0.95) if gamma is None else gamma
    return TabularMDP(P, r, gamma, nu)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_states)


def finite_horizon_value(mdp: TabularMDP, horizon: int) -> np.ndarray:
    """Best expected undiscounted reward within ``horizon`` steps, per start state."""
    v = np.zeros(mdp.n_states)
    for _ in range(horizon):
        v = (mdp.r + mdp.P @ v).max(axis=1)
    return v
