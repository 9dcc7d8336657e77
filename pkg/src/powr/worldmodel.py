"""Conditional-mean-embedding world model and closed-form action-value estimates.

Given transitions ``(x_i, a_i, x'_i, r_i)`` the transfer operator and reward are
estimated by kernel ridge regression on the state-action Gram matrix
``K_lam = K + n lam I``.  For a policy ``pi`` the action-value estimate is

    q_hat = sum_i c_i k(., x_i) [. == a_i],   (K_lam - gamma M_pi) c = y

with ``M_pi[i, j] = k(x'_i, x_j) pi(a_j | x'_i)``.

Two extensions of the plain estimator are built in:

* Terminal transitions (not step-limit truncations) lead to an absorbing state
  that keeps paying the reward shift.  Their row of ``M_pi`` is dropped and the
  absorbing value ``gamma * shift / (1 - gamma)`` is added to the target.
* Exact duplicates of ``(x, a)`` may be merged.  Anchor ``u`` with ``m_u``
  samples then gets ridge ``n lam / m_u``, averaged reward and an averaged
  next-state row; with all ``m_u = 1`` this is the plain estimator.

Internally the next-state rows are stored as ``W @ H`` where ``H`` is the kernel
between the distinct evolved states and the anchors and ``W`` (sparse) holds the
per-anchor next-state weights.  Without merging ``W`` is diagonal and ``H`` is
exactly ``k(x'_i, x_j)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .env import TransitionDataset
from .errors import ContractionError, NumericalError
from .kernels import Kernel

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
GUARD_MARGIN = 1e-6
MAX_REFITS = 3


@dataclass
class WorldModel:
    kernel: Kernel
    action_count: int
    anchor_states: np.ndarray
    anchor_actions: np.ndarray
    multiplicity: np.ndarray
    evolved_states: np.ndarray
    W: sparse.csr_matrix
    H: np.ndarray | sparse.csr_matrix
    K: np.ndarray | sparse.csr_matrix
    y: np.ndarray
    terminal_frac: np.ndarray
    lam: float
    n_samples: int
    reward_shift: float = 0.0
    factor: object = field(default=None, repr=False)
    b: np.ndarray | None = None

    def __post_init__(self):
        if self.factor is None:
            self._factorize()

    # -- linear algebra -----------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.anchor_actions)

    @property
    def is_sparse(self) -> bool:
        return sparse.issparse(self.K)

    @property
    def ridge(self) -> np.ndarray:
        return self.n_samples * self.lam / self.multiplicity

    def K_lambda(self):
        if self.is_sparse:
            return (self.K + sparse.diags(self.ridge)).tocsc()
        return self.K + np.diag(self.ridge)

    def _factorize(self):
        if not np.all(np.isfinite(self.y)):
            raise NumericalError("non-finite rewards in the training data")
        Kl = self.K_lambda()
        try:
            if self.is_sparse:
                self.factor = splinalg.splu(Kl)
            else:
                self.factor = scipy.linalg.cho_factor(Kl, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError, RuntimeError) as exc:
            raise NumericalError(f"factorization of K_lambda failed (n={self.n}, lam={self.lam}): {exc}") from exc
        self.b = self.solve_K(self.y)

    def solve_K(self, v: np.ndarray) -> np.ndarray:
        """``K_lambda^{-1} v``."""
        if self.is_sparse:
            return self.factor.solve(np.asarray(v, dtype=float))
        return scipy.linalg.cho_solve(self.factor, v)

    def with_lambda(self, lam: float) -> "WorldModel":
        return replace(self, lam=float(lam), factor=None, b=None)

    def target(self, gamma: float) -> np.ndarray:
        """Reward targets with the absorbing value of terminal transitions folded in."""
        if self.reward_shift == 0.0:
            return self.y
        return self.y + gamma * self.terminal_frac * self.reward_shift / (1.0 - gamma)

    # -- policy-dependent pieces --------------------------------------------

    def M(self, evolved_probs: np.ndarray):
        """``M_pi`` given the policy's action probabilities at every evolved state."""
        P = np.asarray(evolved_probs, dtype=float)
        if P.shape != (len(self.evolved_states), self.action_count):
            raise ValueError(f"expected probabilities of shape {(len(self.evolved_states), self.action_count)}")
        if self.is_sparse:
            H = self.H.tocoo()
            data = H.data * P[H.row, self.anchor_actions[H.col]]
            weighted = sparse.csr_matrix((data, (H.row, H.col)), shape=H.shape)
            return (self.W @ weighted).tocsr()
        return self.W @ (self.H * P[:, self.anchor_actions])

    def solve_q(self, M, gamma: float) -> np.ndarray:
        """Coefficients ``c`` of ``(I - gamma K_lambda^{-1} M) c = K_lambda^{-1} y``."""
        rhs = self.target(gamma)
        if gamma == 0.0:
            return self.solve_K(rhs)
        if self.is_sparse:
            A = (self.K_lambda() - gamma * M).tocsc()
            c = splinalg.spsolve(A, rhs)
        else:
            try:
                c = scipy.linalg.solve(self.K_lambda() - gamma * M, rhs, check_finite=True)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise NumericalError(f"q-system solve failed: {exc}") from exc
        if not np.all(np.isfinite(c)):
            raise NumericalError("q-system solve produced non-finite coefficients")
        return c

    def spectral_radius(self, M, iters: int = 50, tol: float = 1e-6, v0=None) -> tuple[float, np.ndarray]:
        """Power-iteration estimate of the spectral radius of ``K_lambda^{-1} M``."""
        v = np.ones(self.n) if v0 is None else np.array(v0, dtype=float)
        norm = np.linalg.norm(v)
        if norm == 0:
            v, norm = np.ones(self.n), np.sqrt(self.n)
        v /= norm
        est = 0.0
        for _ in range(iters):
            w = self.solve_K(M @ v)
            new = float(np.linalg.norm(w))
            if new == 0.0:
                return 0.0, v
            v = w / new
            if abs(new - est) <= tol * max(1.0, new):
                est = new
                break
            est = new
        return est, v

    # -- evaluation ---------------------------------------------------------

    def state_gram(self, states) -> np.ndarray:
        """Rows ``H_x = (k(x, x_i))_i`` for a batch of states."""
        states = np.asarray(states, dtype=float).reshape(-1, self.anchor_states.shape[1])
        return self.kernel.gram(states, self.anchor_states)

    def save(self, path) -> None:
        W = self.W.tocoo()
        arrays = dict(
            format_version=FORMAT_VERSION,
            kernel_family=self.kernel.family,
            kernel_sigma=self.kernel.sigma,
            kernel_length_scales=np.asarray(self.kernel.length_scales or [], dtype=float),
            action_count=self.action_count,
            anchor_states=self.anchor_states,
            anchor_actions=self.anchor_actions,
            multiplicity=self.multiplicity,
            evolved_states=self.evolved_states,
            W_row=W.row, W_col=W.col, W_data=W.data, W_shape=W.shape,
            y=self.y,
            terminal_frac=self.terminal_frac,
            lam=self.lam,
            n_samples=self.n_samples,
            reward_shift=self.reward_shift,
            b=self.b,
        )
        if not self.is_sparse:
            arrays["H"] = self.H
            arrays["factor"] = self.factor[0]
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path) -> "WorldModel":
        with np.load(path, allow_pickle=False) as z:
            if int(z["format_version"]) != FORMAT_VERSION:
                raise ValueError(f"unsupported world-model format {int(z['format_version'])}")
            scales = tuple(z["kernel_length_scales"]) or None
            kernel = Kernel(str(z["kernel_family"]), float(z["kernel_sigma"]), scales)
            W = sparse.csr_matrix((z["W_data"], (z["W_row"], z["W_col"])), shape=tuple(z["W_shape"]))
            anchors, evolved = z["anchor_states"], z["evolved_states"]
            K, H = _kernel_blocks(kernel, anchors, z["anchor_actions"], evolved, kernel.is_onehot,
                                  precomputed_H=None if kernel.is_onehot else z["H"])
            factor = None if kernel.is_onehot else (z["factor"], True)
            model = cls(kernel, int(z["action_count"]), anchors, z["anchor_actions"], z["multiplicity"],
                        evolved, W, H, K, z["y"], z["terminal_frac"], float(z["lam"]), int(z["n_samples"]),
                        float(z["reward_shift"]), factor=factor, b=None if kernel.is_onehot else z["b"])
        return model


@dataclass
class QEstimate:
    """``q_hat(x, a) = sum_i c_i k(x, x_i) [a == a_i]``."""

    c: np.ndarray
    model: WorldModel
    radius: float | None = None

    def values(self, states) -> np.ndarray:
        """``q_hat`` at a batch of states, shape ``(len(states), action_count)``."""
        Hx = self.model.state_gram(states)
        return Hx @ self.coefficient_matrix()

    def coefficient_matrix(self) -> np.ndarray:
        """``diag(c) E``: coefficient ``c_i`` placed in column ``a_i`` of row ``i``."""
        out = np.zeros((self.model.n, self.model.action_count))
        out[np.arange(self.model.n), self.model.anchor_actions] = self.c
        return out

    def at_evolved(self) -> np.ndarray:
        return self.model.H @ self.coefficient_matrix()


def _kernel_blocks(kernel, anchors, actions, evolved, use_sparse, precomputed_H=None):
    if use_sparse:
        Ks = kernel.gram_sparse(anchors).tocoo()
        keep = actions[Ks.row] == actions[Ks.col]
        K = sparse.csr_matrix((Ks.data[keep], (Ks.row[keep], Ks.col[keep])), shape=Ks.shape)
        H = kernel.gram_sparse(evolved, anchors)
    else:
        K = kernel.gram(anchors) * (actions[:, None] == actions[None, :])
        H = kernel.gram(evolved, anchors) if precomputed_H is None else precomputed_H
    return K, H


def fit(dataset: TransitionDataset, kernel: Kernel, lam: float, *, dedup: bool = False,
        absorb_terminal: bool = True, use_sparse: bool | None = None) -> WorldModel:
    """Fit the transfer-operator and reward estimators on ``dataset``.

    Rewards are shifted by the environment's ``reward_shift`` so they are
    non-negative.  ``use_sparse`` defaults to True for the one-hot kernel.
    """
    if len(dataset) == 0:
        raise ValueError("cannot fit a world model on an empty dataset")
    if not lam > 0:
        raise ValueError("lam must be positive")
    if use_sparse is None:
        use_sparse = kernel.is_onehot
    if use_sparse and not kernel.is_onehot:
        raise ValueError("the sparse path requires the one-hot kernel")
    spec = dataset.spec
    states, actions, next_states, rewards, done, truncated = dataset.columns()
    if not (np.all(np.isfinite(states)) and np.all(np.isfinite(next_states)) and np.all(np.isfinite(rewards))):
        raise NumericalError("dataset contains non-finite values")
    shift = spec.reward_shift
    y_raw = rewards + shift
    terminated = (done & ~truncated) if absorb_terminal else np.zeros(len(actions), bool)
    n_samples = len(actions)

    if dedup:
        keys = np.column_stack([states, actions])
        anchor_keys, anchor_idx, mult = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        anchor_idx = anchor_idx.reshape(-1)
        anchors = anchor_keys[:, :-1]
        anchor_actions = anchor_keys[:, -1].astype(np.int64)
        evolved, evolved_idx = np.unique(next_states, axis=0, return_inverse=True)
        evolved_idx = evolved_idx.reshape(-1)
        live = ~terminated
        W = sparse.csr_matrix((1.0 / mult[anchor_idx[live]], (anchor_idx[live], evolved_idx[live])),
                              shape=(len(anchor_actions), len(evolved)))
        y = np.bincount(anchor_idx, weights=y_raw, minlength=len(mult)) / mult
        term = np.bincount(anchor_idx, weights=terminated.astype(float), minlength=len(mult)) / mult
    else:
        anchors, anchor_actions, evolved = states, actions.astype(np.int64), next_states
        mult = np.ones(n_samples)
        W = sparse.diags((~terminated).astype(float)).tocsr()
        y = y_raw.astype(float)
        term = terminated.astype(float)

    K, H = _kernel_blocks(kernel, anchors, anchor_actions, evolved, use_sparse)
    model = WorldModel(kernel, spec.action_count, anchors, anchor_actions, mult.astype(float), evolved, W, H, K,
                       y, term, float(lam), n_samples, shift)
    log.debug("fitted world model: n=%d anchors, %d evolved states, lam=%g", model.n, len(evolved), lam)
    return model


def _probs_at_evolved(model: WorldModel, policy) -> np.ndarray:
    if callable(policy):
        return np.asarray(policy(model.evolved_states), dtype=float)
    return np.asarray(policy, dtype=float)


def estimate_q(model: WorldModel, policy, gamma: float, *, guard: bool = True, v0=None) -> QEstimate:
    """Closed-form action-value estimate of ``policy`` under the fitted world model.

    ``policy`` is either an array of action probabilities at the model's evolved
    states or a callable mapping the evolved states to such an array.  With
    ``guard`` the spectral radius of ``K_lambda^{-1} M_pi`` is checked first; if
    ``gamma * radius`` reaches one, ``lam`` is multiplied by 10 and the model
    refitted (at most three times) before a ``ContractionError`` is raised.  The
    returned estimate references the (possibly refitted) model.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    probs = _probs_at_evolved(model, policy)
    M = model.M(probs)
    radius = None
    if guard and gamma > 0:
        for attempt in range(MAX_REFITS + 1):
            radius, v0 = model.spectral_radius(M, v0=v0)
            if gamma * radius < 1.0 - GUARD_MARGIN:
                break
            if attempt == MAX_REFITS:
                raise ContractionError(
                    f"gamma * spectral radius = {gamma * radius:.6g} >= 1 after {MAX_REFITS} refits "
                    f"(lam={model.lam:g})", radius=radius, lam=model.lam)
            log.warning("contraction guard: gamma*rho=%.6g, refitting with lam=%g", gamma * radius, model.lam * 10)
            model = model.with_lambda(model.lam * 10.0)
    c = model.solve_q(M, gamma)
    return QEstimate(c, model, radius)


def eval_q(qest: QEstimate, x, a: int) -> float:
    """``q_hat(x, a)`` at a single state-action pair."""
    return float(qest.values(np.atleast_2d(np.asarray(x, dtype=float)))[0, int(a)])


def operator_norm_estimate(model: WorldModel, policy, iters: int = 50, tol: float = 1e-6) -> float:
    """Spectral radius of ``K_lambda^{-1} M_pi`` by power iteration."""
    M = model.M(_probs_at_evolved(model, policy))
    return model.spectral_radius(M, iters=iters, tol=tol)[0]
