"""Policy mirror descent on top of a fitted world model.

The policy after ``t`` steps is the softmax of cumulative action-value
estimates, ``pi_t(. | x) = softmax(eta * H_x C_t)``, where ``C_t`` (one row per
anchor, one column per action) accumulates the coefficients of every past
``q_hat``.  Starting from ``C_0 = 0`` gives the uniform policy.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.special import softmax

from .errors import NumericalError
from .kernels import Kernel
from .worldmodel import QEstimate, WorldModel, estimate_q

SATURATION_SPREAD = 30.0


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    if np.any(np.isnan(logits)):
        raise NumericalError("NaN in policy logits")
    return softmax(logits, axis=-1)


@dataclass
class PolicyWeights:
    C: np.ndarray
    eta: float
    model: WorldModel
    t: int = 0

    @classmethod
    def zeros(cls, model: WorldModel, eta: float) -> "PolicyWeights":
        return cls(np.zeros((model.n, model.action_count)), float(eta), model)

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")
        if self.C.shape != (self.model.n, self.model.action_count):
            raise ValueError("weights do not match the world model's anchors")

    def logits_at_evolved(self) -> np.ndarray:
        return self.eta * (self.model.H @ self.C)

    def probs_at_evolved(self) -> np.ndarray:
        return softmax_rows(self.logits_at_evolved())


class SoftmaxPolicy:
    """``pi(. | x) = softmax(eta * k(x, anchors) @ C)``.

    Only the kernel, anchor states, ``C`` and ``eta`` are needed, so a policy
    outlives the world model that produced it.
    """

    def __init__(self, kernel: Kernel, anchor_states: np.ndarray, C: np.ndarray, eta: float,
                 action_count: int | None = None):
        self.kernel = kernel
        self.anchor_states = np.asarray(anchor_states, dtype=float)
        self.C = np.asarray(C, dtype=float)
        self.eta = float(eta)
        self.action_count = self.C.shape[1] if action_count is None else action_count
        if np.any(np.isnan(self.C)):
            raise NumericalError("NaN in policy weights")

    @classmethod
    def from_weights(cls, weights: PolicyWeights) -> "SoftmaxPolicy":
        return cls(weights.model.kernel, weights.model.anchor_states, weights.C, weights.eta,
                   weights.model.action_count)

    @classmethod
    def uniform(cls, action_count: int, state_dim: int = 1) -> "SoftmaxPolicy":
        return cls(Kernel("onehot"), np.zeros((0, state_dim)), np.zeros((0, action_count)), 0.0, action_count)

    def logits(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float).reshape(-1, self.anchor_states.shape[1])
        if len(self.anchor_states) == 0 or self.eta == 0.0:
            return np.zeros((len(states), self.action_count))
        return self.eta * (self.kernel.gram(states, self.anchor_states) @ self.C)

    def probs(self, states) -> np.ndarray:
        """Action probabilities for a batch of states, one row per state."""
        return softmax_rows(self.logits(states))

    def __call__(self, state) -> np.ndarray:
        return self.probs(np.atleast_1d(np.asarray(state, dtype=float))[None, :])[0]

    def save(self, path, **meta) -> None:
        np.savez_compressed(path, kernel_family=self.kernel.family, kernel_sigma=self.kernel.sigma,
                            kernel_length_scales=np.asarray(self.kernel.length_scales or [], dtype=float),
                            anchor_states=self.anchor_states, C=self.C, eta=self.eta,
                            **{f"meta_{k}": v for k, v in meta.items()})

    @classmethod
    def load(cls, path) -> tuple["SoftmaxPolicy", dict]:
        with np.load(path, allow_pickle=False) as z:
            scales = tuple(z["kernel_length_scales"]) or None
            kernel = Kernel(str(z["kernel_family"]), float(z["kernel_sigma"]), scales)
            meta = {k[5:]: z[k].item() for k in z.files if k.startswith("meta_")}
            return cls(kernel, z["anchor_states"], z["C"], float(z["eta"])), meta


def policy_probs(policy: SoftmaxPolicy, x) -> np.ndarray:
    return policy(x)


@dataclass
class StepRecord:
    t: int
    c_inf: float
    spectral_radius: float | None
    logit_spread: float
    saturated: bool
    lam: float
    wall_time: float
    epsilon: float | None = None


def pmd_step(weights: PolicyWeights, model: WorldModel | None, gamma: float, *, guard: bool = True,
             v0=None) -> tuple[PolicyWeights, QEstimate]:
    """One POWR iteration.

    Evaluates the current policy at every evolved state, estimates its
    action-value function and adds the coefficients ``c_i`` to column ``a_i``
    of row ``i`` of ``C``.  Returns the new weights and the estimate (of the
    policy *before* the update).
    """
    model = weights.model if model is None else model
    if model.n != weights.C.shape[0]:
        raise ValueError("weights are anchored to a different world model")
    probs = softmax_rows(weights.eta * (model.H @ weights.C))
    q = estimate_q(model, probs, gamma, guard=guard, v0=v0)
    C = weights.C.copy()
    C[np.arange(model.n), model.anchor_actions] += q.c
    return PolicyWeights(C, weights.eta, q.model, weights.t + 1), q


def run_pmd(model: WorldModel, gamma: float, eta: float, T: int, *, weights: PolicyWeights | None = None,
            epsilon_fn: Callable[[PolicyWeights, QEstimate], float] | None = None,
            guard: bool = True, diagnostics_path=None) -> tuple[SoftmaxPolicy, list[StepRecord], PolicyWeights]:
    """Run ``T`` POWR iterations from ``weights`` (default ``C = 0``).

    ``epsilon_fn(weights, q)`` may report the sup-norm error of ``q`` against
    an exact oracle; it is stored in each diagnostics record.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    if weights is None:
        weights = PolicyWeights.zeros(model, eta)
    records = []
    for _ in range(T):
        start = time.perf_counter()
        new, q = pmd_step(weights, None, gamma, guard=guard)
        eps = epsilon_fn(weights, q) if epsilon_fn is not None else None
        logits = new.logits_at_evolved()
        spread = float(np.max(logits.max(1) - logits.min(1))) if logits.size else 0.0
        records.append(StepRecord(weights.t, float(np.max(np.abs(q.c))) if q.c.size else 0.0, q.radius,
                                  spread, spread > SATURATION_SPREAD, q.model.lam,
                                  time.perf_counter() - start, eps))
        weights = new
    if diagnostics_path is not None:
        write_jsonl(diagnostics_path, records)
    return SoftmaxPolicy.from_weights(weights), records, weights


def write_jsonl(path, records, mode: str = "w", **extra) -> None:
    with open(path, mode) as fh:
        for rec in records:
            row = asdict(rec) if hasattr(rec, "__dataclass_fields__") else dict(rec)
            row.update(extra)
            fh.write(json.dumps(row) + "\n")
