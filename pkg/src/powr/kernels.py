"""Positive-definite kernels on states and the separable state-action kernel.

The state-action kernel is ``k((x, a), (x', a')) = k(x, x') [a == a']``, i.e.
the feature map ``phi(x) (x) e_a`` with ``e_a`` the one-hot action encoding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

FAMILIES = ("laplacian", "gaussian", "onehot")


def _as_points(x, dim=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if dim == 1 else x.reshape(1, -1)
    return x


@dataclass(frozen=True)
class Kernel:
    """Kernel on states.

    ``laplacian``: ``exp(-||x - x'|| / sigma)`` (Euclidean norm).
    ``gaussian``: ``exp(-||x - x'||^2 / (2 sigma^2))``.
    ``onehot``: 1 if the states are identical, else 0; ``sigma`` is ignored.

    ``length_scales`` rescales each coordinate before the distance is taken,
    e.g. to map a box onto the unit cube.
    """

    family: str = "laplacian"
    sigma: float = 1.0
    length_scales: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.length_scales is not None:
            object.__setattr__(self, "length_scales", tuple(float(s) for s in self.length_scales))
            if any(s <= 0 for s in self.length_scales):
                raise ValueError("length scales must be positive")

    @property
    def is_onehot(self) -> bool:
        return self.family == "onehot"

    def _scale(self, x: np.ndarray) -> np.ndarray:
        if self.length_scales is None or self.is_onehot:
            return x
        if x.shape[1] != len(self.length_scales):
            raise ValueError("point dimension does not match length_scales")
        return x / np.asarray(self.length_scales)

    def __call__(self, x, y) -> float:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if x.shape != y.shape:
            raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
        return float(self.gram(x[None, :], y[None, :])[0, 0])

    def gram(self, points_a, points_b=None) -> np.ndarray:
        """Matrix with entries ``k(a_i, b_j)``; ``points_b`` defaults to ``points_a``."""
        a = _as_points(points_a)
        b = a if points_b is None else _as_points(points_b, dim=a.shape[1])
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
        if self.is_onehot:
            return np.all(a[:, None, :] == b[None, :, :], axis=-1).astype(float)
        a, b = self._scale(a), self._scale(b)
        if self.family == "laplacian":
            return np.exp(-cdist(a, b) / self.sigma)
        return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * self.sigma ** 2))

    def gram_sparse(self, points_a, points_b=None) -> sparse.csr_matrix:
        """Sparse Gram matrix for the one-hot kernel (equality pattern)."""
        if not self.is_onehot:
            raise ValueError("sparse Gram assembly is only exact for the one-hot kernel")
        a = _as_points(points_a)
        b = a if points_b is None else _as_points(points_b, dim=a.shape[1])
        codes_a, codes_b = state_codes(a, b)
        order = np.argsort(codes_b, kind="stable")
        sorted_b = codes_b[order]
        lo = np.searchsorted(sorted_b, codes_a, side="left")
        hi = np.searchsorted(sorted_b, codes_a, side="right")
        counts = hi - lo
        rows = np.repeat(np.arange(len(codes_a)), counts)
        offsets = np.arange(len(rows)) - np.repeat(np.cumsum(counts) - counts, counts)
        cols = order[np.repeat(lo, counts) + offsets]
        return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(codes_a), len(codes_b)))


def state_codes(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integer codes such that rows of ``a`` and ``b`` share a code iff they are equal."""
    both = np.vstack([a, b])
    _, inv = np.unique(both, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    return inv[: len(a)], inv[len(a):]


@dataclass(frozen=True)
class StateActionKernel:
    base: Kernel
    action_count: int

    def __post_init__(self):
        if self.action_count < 1:
            raise ValueError("action_count must be positive")

    def __call__(self, xa, yb) -> float:
        (x, a), (y, b) = xa, yb
        return self.base(x, y) if int(a) == int(b) else 0.0

    def gram(self, states_a, actions_a, states_b=None, actions_b=None) -> np.ndarray:
        if states_b is None:
            states_b, actions_b = states_a, actions_a
        mask = np.asarray(actions_a)[:, None] == np.asarray(actions_b)[None, :]
        return self.base.gram(states_a, states_b) * mask


def kernel_eval(kernel: Kernel, x, y) -> float:
    return kernel(x, y)


def gram(kernel: Kernel, points_a, points_b=None) -> np.ndarray:
    return kernel.gram(points_a, points_b)


def gram_state_action(sak: StateActionKernel, pairs_a, pairs_b=None) -> np.ndarray:
    """Gram matrix over ``(states, actions)`` pairs; zero wherever the actions differ."""
    states_a, actions_a = pairs_a
    if pairs_b is None:
        return sak.gram(states_a, actions_a)
    states_b, actions_b = pairs_b
    return sak.gram(states_a, actions_a, states_b, actions_b)
