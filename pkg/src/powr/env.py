"""Environments, transition storage and episode rollout.

Three environments are shipped: a slippery 4x4 frozen lake (``gridworld4``),
the 5x5 taxi domain (``taxi``) and mountain car (``mountaincar``).  A small
deterministic chain (``chain``) exists for hand-checkable tests.

Environments are value-like: ``step`` takes the current state and an explicit
random generator and returns the next state, so several environments can be
driven from independent streams without shared mutable state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .errors import PolicyError, UnsupportedError

PolicyFn = Callable[[object], np.ndarray]


def make_rng(*keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by an arbitrary tuple of ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    action_count: int
    max_episode_steps: int
    gamma: float
    reward_threshold: float
    n_states: int | None = None
    low: tuple[float, ...] | None = None
    high: tuple[float, ...] | None = None
    # added to every reward before world-model fitting, subtracted for reporting
    reward_shift: float = 0.0

    def __post_init__(self):
        if self.action_count < 2:
            raise ValueError("action_count must be >= 2")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.max_episode_steps < 1:
            raise ValueError("max_episode_steps must be positive")
        if (self.n_states is None) == (self.low is None):
            raise ValueError("give either n_states or box bounds")
        if self.low is not None:
            if self.high is None or len(self.low) != len(self.high):
                raise ValueError("box bounds must have matching lengths")
            for lo, hi in zip(self.low, self.high):
                if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                    raise ValueError("box bounds must be finite with low < high")

    @property
    def discrete(self) -> bool:
        return self.n_states is not None

    @property
    def state_dim(self) -> int:
        return 1 if self.discrete else len(self.low)


@dataclass(frozen=True)
class Transition:
    x: np.ndarray
    a: int
    x_next: np.ndarray
    r: float
    done: bool
    truncated: bool = False


class TransitionDataset:
    """Columnar replay buffer of ``(x, a, x', r, done)`` tuples.

    Rows are kept in visitation order.  Storage is a list of per-episode
    blocks concatenated on demand, which keeps appends cheap for millions of
    steps.
    """

    def __init__(self, spec: EnvSpec, seed: int | None = None, policy_tag: str = ""):
        self.spec = spec
        self.seed = seed
        self.policy_tag = policy_tag
        self._blocks: list[tuple[np.ndarray, ...]] = []
        self._cache: tuple[np.ndarray, ...] | None = None

    @classmethod
    def from_arrays(cls, spec, states, actions, next_states, rewards, done, truncated=None,
                    seed=None, policy_tag=""):
        ds = cls(spec, seed=seed, policy_tag=policy_tag)
        ds.extend_arrays(states, actions, next_states, rewards, done, truncated)
        return ds

    def _check(self, states, actions, next_states, rewards):
        spec = self.spec
        if actions.size and (actions.min() < 0 or actions.max() >= spec.action_count):
            raise ValueError("action index out of range")
        if not np.all(np.isfinite(rewards)):
            raise ValueError("rewards must be finite")
        for arr in (states, next_states):
            if spec.discrete:
                if arr.size and (arr.min() < 0 or arr.max() >= spec.n_states):
                    raise ValueError("state index out of range")
            elif arr.size:
                lo, hi = np.asarray(spec.low), np.asarray(spec.high)
                if np.any(arr < lo - 1e-12) or np.any(arr > hi + 1e-12):
                    raise ValueError("state outside the box bounds")

    def extend_arrays(self, states, actions, next_states, rewards, done, truncated=None):
        d = self.spec.state_dim
        states = np.asarray(states, dtype=float).reshape(-1, d)
        next_states = np.asarray(next_states, dtype=float).reshape(-1, d)
        actions = np.asarray(actions, dtype=np.int64).reshape(-1)
        rewards = np.asarray(rewards, dtype=float).reshape(-1)
        done = np.asarray(done, dtype=bool).reshape(-1)
        if truncated is None:
            truncated = np.zeros_like(done)
        truncated = np.asarray(truncated, dtype=bool).reshape(-1)
        n = len(actions)
        if not all(len(v) == n for v in (states, next_states, rewards, done, truncated)):
            raise ValueError("column lengths differ")
        self._check(states, actions, next_states, rewards)
        if n:
            self._blocks.append((states, actions, next_states, rewards, done, truncated))
            self._cache = None

    def append(self, t: Transition) -> None:
        self.extend_arrays(t.x, [t.a], t.x_next, [t.r], [t.done], [t.truncated])

    def extend(self, other: "TransitionDataset") -> None:
        if other.spec.env_id != self.spec.env_id:
            raise ValueError("cannot mix datasets from different environments")
        if len(other):
            self.extend_arrays(*other.columns())

    def columns(self) -> tuple[np.ndarray, ...]:
        """``(states, actions, next_states, rewards, done, truncated)``."""
        if self._cache is None:
            d = self.spec.state_dim
            if not self._blocks:
                self._cache = (np.zeros((0, d)), np.zeros(0, np.int64), np.zeros((0, d)),
                               np.zeros(0), np.zeros(0, bool), np.zeros(0, bool))
            else:
                self._cache = tuple(np.concatenate(c) for c in zip(*self._blocks))
                self._blocks = [self._cache]
        return self._cache

    @property
    def states(self):
        return self.columns()[0]

    @property
    def actions(self):
        return self.columns()[1]

    @property
    def next_states(self):
        return self.columns()[2]

    @property
    def rewards(self):
        return self.columns()[3]

    @property
    def done(self):
        return self.columns()[4]

    @property
    def truncated(self):
        return self.columns()[5]

    @property
    def terminated(self):
        """Done because a terminal state was reached, not because of the step limit."""
        return self.done & ~self.truncated

    def __len__(self) -> int:
        return sum(len(b[1]) for b in self._blocks)

    def __iter__(self) -> Iterator[Transition]:
        s, a, s2, r, d, tr = self.columns()
        for i in range(len(a)):
            yield Transition(s[i], int(a[i]), s2[i], float(r[i]), bool(d[i]), bool(tr[i]))

    def subset(self, idx) -> "TransitionDataset":
        cols = [c[idx] for c in self.columns()]
        return TransitionDataset.from_arrays(self.spec, *cols, seed=self.seed, policy_tag=self.policy_tag)

    def save_text(self, path) -> None:
        """One transition per line: x fields, a, x' fields, r, done, truncated."""
        s, a, s2, r, d, tr = self.columns()
        table = np.column_stack([s, a, s2, r, d.astype(int), tr.astype(int)])
        header = f"env={self.spec.env_id} seed={self.seed} policy={self.policy_tag}"
        np.savetxt(path, table, fmt="%.17g", header=header)

    @classmethod
    def load_text(cls, path, spec: EnvSpec | None = None) -> "TransitionDataset":
        with open(path) as fh:
            header = fh.readline().lstrip("#").strip()
        meta = dict(item.split("=", 1) for item in header.split())
        if spec is None:
            spec = make_env(meta["env"]).spec
        table = np.loadtxt(path, ndmin=2)
        d = spec.state_dim
        seed = None if meta.get("seed", "None") == "None" else int(meta["seed"])
        return cls.from_arrays(spec, table[:, :d], table[:, d].astype(np.int64), table[:, d + 1:2 * d + 1],
                               table[:, 2 * d + 1], table[:, 2 * d + 2] > 0, table[:, 2 * d + 3] > 0,
                               seed=seed, policy_tag=meta.get("policy", ""))


class Env:
    """Base class.  Subclasses set ``spec`` and implement ``reset``/``step``."""

    spec: EnvSpec

    @property
    def discrete(self) -> bool:
        return self.spec.discrete

    def _check_action(self, action):
        if not 0 <= int(action) < self.spec.action_count:
            raise ValueError(f"action {action} out of range [0, {self.spec.action_count})")

    def reset(self, rng: np.random.Generator):
        raise NotImplementedError

    def step(self, state, action: int, rng: np.random.Generator):
        raise NotImplementedError

    def as_array(self, state) -> np.ndarray:
        return np.atleast_1d(np.asarray(state, dtype=float))

    def tabular(self):
        """``(P, r_raw, terminal_mask, nu)`` for discrete environments."""
        raise UnsupportedError(f"{self.spec.env_id} has no exact tabular dynamics")


class DiscreteEnv(Env):
    """Discrete environment whose dynamics are given as explicit outcome lists."""

    def _outcomes(self, s: int, a: int) -> list[tuple[float, int, float, bool]]:
        raise NotImplementedError

    def initial_distribution(self) -> np.ndarray:
        raise NotImplementedError

    def is_terminal(self, s: int) -> bool:
        return False

    def reset(self, rng):
        nu = self.initial_distribution()
        return int(np.searchsorted(np.cumsum(nu), rng.random() * nu.sum(), side="right"))

    def step(self, state, action, rng):
        self._check_action(action)
        s = int(np.asarray(state).reshape(-1)[0])
        if self.is_terminal(s):
            return s, 0.0, True
        outs = self._outcomes(s, int(action))
        if len(outs) == 1:
            _, s2, r, done = outs[0]
            return s2, r, done
        u = rng.random()
        acc = 0.0
        for p, s2, r, done in outs:
            acc += p
            if u < acc:
                return s2, r, done
        return outs[-1][1:]

    def tabular(self):
        n, na = self.spec.n_states, self.spec.action_count
        P = np.zeros((n, na, n))
        r = np.zeros((n, na))
        terminal = np.array([self.is_terminal(s) for s in range(n)])
        for s in range(n):
            for a in range(na):
                if terminal[s]:
                    P[s, a, s] = 1.0
                    continue
                for p, s2, rew, _ in self._outcomes(s, a):
                    P[s, a, s2] += p
                    r[s, a] += p * rew
        return P, r, terminal, self.initial_distribution()


class FrozenLake(DiscreteEnv):
    """Slippery lake: the intended move and both perpendicular moves each occur w.p. 1/3.

    Actions: 0 left, 1 down, 2 right, 3 up.  Reward 1 on entering the goal.
    """

    MAP = ("SFFF", "FHFH", "FFFH", "HFFG")

    def __init__(self, slippery: bool = True, gamma: float = 0.99, max_episode_steps: int = 100):
        self.slippery = slippery
        self.desc = self.MAP
        self.nrow, self.ncol = len(self.desc), len(self.desc[0])
        self.spec = EnvSpec("gridworld4", action_count=4, max_episode_steps=max_episode_steps,
                            gamma=gamma, reward_threshold=0.8, n_states=self.nrow * self.ncol)

    def _cell(self, s):
        return self.desc[s // self.ncol][s % self.ncol]

    def is_terminal(self, s):
        return self._cell(s) in "HG"

    def _move(self, s, a):
        row, col = divmod(s, self.ncol)
        if a == 0:
            col = max(col - 1, 0)
        elif a == 1:
            row = min(row + 1, self.nrow - 1)
        elif a == 2:
            col = min(col + 1, self.ncol - 1)
        else:
            row = max(row - 1, 0)
        return row * self.ncol + col

    def _outcomes(self, s, a):
        moves = [(a - 1) % 4, a, (a + 1) % 4] if self.slippery else [a]
        p = 1.0 / len(moves)
        out = []
        for b in moves:
            s2 = self._move(s, b)
            out.append((p, s2, 1.0 if self._cell(s2) == "G" else 0.0, self.is_terminal(s2)))
        return out

    def initial_distribution(self):
        nu = np.zeros(self.spec.n_states)
        nu[0] = 1.0
        return nu


class Taxi(DiscreteEnv):
    """5x5 taxi domain with 500 states and 6 actions.

    State code ``((row * 5 + col) * 5 + passenger) * 4 + destination``; passenger
    index 4 means "in the taxi".  Actions: south, north, east, west, pickup,
    dropoff.  Rewards: -1 per step, -10 for an illegal pickup/dropoff, +20 for
    a successful dropoff (terminal).
    """

    DESC = (
        "+---------+",
        "|R: | : :G|",
        "| : | : : |",
        "| : : : : |",
        "| | : | : |",
        "|Y| : |B: |",
        "+---------+",
    )
    LOCS = ((0, 0), (0, 4), (4, 0), (4, 3))

    def __init__(self, gamma: float = 0.99, max_episode_steps: int = 200):
        self.spec = EnvSpec("taxi", action_count=6, max_episode_steps=max_episode_steps, gamma=gamma,
                            reward_threshold=6.0, n_states=500, reward_shift=10.0)

    @staticmethod
    def encode(row, col, passenger, dest):
        return ((row * 5 + col) * 5 + passenger) * 4 + dest

    @staticmethod
    def decode(s):
        s, dest = divmod(s, 4)
        s, passenger = divmod(s, 5)
        row, col = divmod(s, 5)
        return row, col, passenger, dest

    def is_terminal(self, s):
        # passenger sitting at its destination only happens after a successful dropoff
        _, _, passenger, dest = self.decode(s)
        return passenger == dest

    def _outcomes(self, s, a):
        row, col, pas, dest = self.decode(s)
        new_row, new_col, new_pas = row, col, pas
        reward, done = -1.0, False
        loc = (row, col)
        if a == 0:
            new_row = min(row + 1, 4)
        elif a == 1:
            new_row = max(row - 1, 0)
        elif a == 2:
            if self.DESC[1 + row][2 * col + 2] == ":":
                new_col = min(col + 1, 4)
        elif a == 3:
            if self.DESC[1 + row][2 * col] == ":":
                new_col = max(col - 1, 0)
        elif a == 4:
            if pas < 4 and loc == self.LOCS[pas]:
                new_pas = 4
            else:
                reward = -10.0
        else:
            if loc == self.LOCS[dest] and pas == 4:
                new_pas, done, reward = dest, True, 20.0
            elif loc in self.LOCS and pas == 4:
                new_pas = self.LOCS.index(loc)
            else:
                reward = -10.0
        return [(1.0, self.encode(new_row, new_col, new_pas, dest), reward, done)]

    def initial_distribution(self):
        nu = np.zeros(500)
        for s in range(500):
            _, _, pas, dest = self.decode(s)
            if pas < 4 and pas != dest:
                nu[s] = 1.0
        return nu / nu.sum()


class Chain(DiscreteEnv):
    """Deterministic chain: action 1 moves right, 0 moves left; reward 1 on landing in the last state."""

    def __init__(self, n_states: int = 2, gamma: float = 0.5, max_episode_steps: int = 50):
        self.spec = EnvSpec("chain", action_count=2, max_episode_steps=max_episode_steps, gamma=gamma,
                            reward_threshold=1.0, n_states=n_states)

    def _outcomes(self, s, a):
        s2 = min(s + 1, self.spec.n_states - 1) if a == 1 else max(s - 1, 0)
        return [(1.0, s2, 1.0 if s2 == self.spec.n_states - 1 else 0.0, False)]

    def initial_distribution(self):
        nu = np.zeros(self.spec.n_states)
        nu[0] = 1.0
        return nu


class MountainCar(Env):
    """Mountain car with three actions (push left, no push, push right) and reward -1 per step."""

    FORCE = 0.001
    GRAVITY = 0.0025
    MIN_POS, MAX_POS = -1.2, 0.6
    MAX_SPEED = 0.07
    GOAL_POS = 0.5

    def __init__(self, gamma: float = 0.99, max_episode_steps: int = 200):
        self.spec = EnvSpec("mountaincar", action_count=3, max_episode_steps=max_episode_steps, gamma=gamma,
                            reward_threshold=-110.0, low=(self.MIN_POS, -self.MAX_SPEED),
                            high=(self.MAX_POS, self.MAX_SPEED), reward_shift=1.0)

    def reset(self, rng):
        return np.array([rng.uniform(-0.6, -0.4), 0.0])

    def step(self, state, action, rng=None):
        self._check_action(action)
        position, velocity = float(state[0]), float(state[1])
        velocity += (int(action) - 1) * self.FORCE + math.cos(3 * position) * (-self.GRAVITY)
        velocity = min(max(velocity, -self.MAX_SPEED), self.MAX_SPEED)
        position += velocity
        position = min(max(position, self.MIN_POS), self.MAX_POS)
        if position == self.MIN_POS and velocity < 0:
            velocity = 0.0
        done = position >= self.GOAL_POS and velocity >= 0
        return np.array([position, velocity]), -1.0, bool(done)


ENV_IDS = ("gridworld4", "taxi", "mountaincar", "chain")


def make_env(env_id: str, **kwargs) -> Env:
    if env_id in ("gridworld4", "gridworld"):
        return FrozenLake(**kwargs)
    if env_id == "taxi":
        return Taxi(**kwargs)
    if env_id == "mountaincar":
        return MountainCar(**kwargs)
    if env_id == "chain":
        return Chain(**kwargs)
    raise ValueError(f"unknown env id {env_id!r}; choose from {ENV_IDS}")


def reset(env: Env, seed: int):
    """Start state drawn from the environment's initial distribution; deterministic in ``seed``."""
    return env.reset(make_rng(seed))


def step(env: Env, state, action: int, rng: np.random.Generator):
    return env.step(state, action, rng)


def check_probs(p, action_count: int) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (action_count,):
        raise PolicyError(f"policy returned shape {p.shape}, expected ({action_count},)")
    if np.any(np.isnan(p)) or np.any(p < 0):
        raise PolicyError("policy returned negative or NaN probabilities")
    if abs(p.sum() - 1.0) > 1e-9:
        raise PolicyError(f"policy probabilities sum to {p.sum()!r}")
    return p


def sample_action(p: np.ndarray, rng: np.random.Generator) -> int:
    a = int(np.searchsorted(np.cumsum(p), rng.random() * p.sum(), side="right"))
    return min(a, len(p) - 1)


def run_episode(env: Env, choose: Callable, horizon: int, rng: np.random.Generator,
                dataset: TransitionDataset | None = None) -> tuple[float, float, int]:
    """Run one episode; ``choose(state, rng)`` returns an action index.

    Returns ``(discounted_return, undiscounted_return, steps)``.  Rewards are
    raw (unshifted).  The final transition is flagged truncated when the
    horizon cuts the episode short.
    """
    gamma = env.spec.gamma
    state = env.reset(rng)
    disc = total = 0.0
    rows = []
    t = 0
    while t < horizon:
        a = choose(state, rng)
        nxt, r, done = env.step(state, a, rng)
        truncated = (not done) and t + 1 == horizon
        rows.append((env.as_array(state), a, env.as_array(nxt), r, done or truncated, truncated))
        disc += gamma ** t * r
        total += r
        t += 1
        state = nxt
        if done:
            break
    if dataset is not None and rows:
        cols = list(zip(*rows))
        dataset.extend_arrays(np.array(cols[0]), cols[1], np.array(cols[2]), cols[3], cols[4], cols[5])
    return disc, total, t


def rollout(env: Env, policy_fn: PolicyFn, horizon: int, seed: int,
            policy_tag: str = "") -> tuple[TransitionDataset, float]:
    """One episode under ``policy_fn``; returns the transitions and the discounted return."""
    na = env.spec.action_count

    def choose(state, rng):
        return sample_action(check_probs(policy_fn(state), na), rng)

    ds = TransitionDataset(env.spec, seed=seed, policy_tag=policy_tag)
    disc, _, _ = run_episode(env, choose, horizon, make_rng(seed), ds)
    return ds, disc


@dataclass
class TabularMDP:
    """Exact finite MDP.

    ``P[x, a, x']`` transition tensor, ``r[x, a]`` expected reward, ``nu`` start
    distribution.  ``reward_shift`` is the constant already folded into ``r``
    (absorbing terminal states pay exactly the shift).
    """

    P: np.ndarray
    r: np.ndarray
    gamma: float
    nu: np.ndarray
    terminal: np.ndarray | None = None
    reward_shift: float = 0.0

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.nu = np.asarray(self.nu, dtype=float)
        nx, na, nx2 = self.P.shape
        if nx != nx2 or self.r.shape != (nx, na) or self.nu.shape != (nx,):
            raise ValueError("inconsistent MDP shapes")
        if not np.allclose(self.P.sum(-1), 1.0, atol=1e-12, rtol=0):
            raise ValueError("transition rows must sum to 1")
        if not np.all(np.isfinite(self.r)):
            raise ValueError("rewards must be finite")
        if abs(self.nu.sum() - 1.0) > 1e-12:
            raise ValueError("start distribution must sum to 1")
        if self.terminal is None:
            self.terminal = np.zeros(nx, bool)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def exact_dynamics(env: Env, shifted: bool = True) -> TabularMDP:
    """Exact transition tensor and expected rewards of a discrete environment.

    With ``shifted`` the environment's reward shift is added to every reward,
    including the zero reward of absorbing terminal states, so the MDP matches
    what the world model is fitted on.
    """
    if not env.discrete:
        raise UnsupportedError(f"exact dynamics unavailable for continuous env {env.spec.env_id}")
    P, r, terminal, nu = env.tabular()
    shift = env.spec.reward_shift if shifted else 0.0
    return TabularMDP(P, r + shift, env.spec.gamma, nu, terminal, reward_shift=shift)


def exhaustive_dataset(env: Env, repeats: int = 1) -> TransitionDataset:
    """Every (x, a) pair ``repeats`` times with next states in exact proportion to the dynamics.

    Needs ``repeats`` to be a multiple of the common denominator of the transition
    probabilities (3 for the slippery lake); next-state counts are rounded otherwise.
    """
    if not env.discrete:
        raise UnsupportedError("exhaustive datasets need a discrete environment")
    rows = []
    for s in range(env.spec.n_states):
        terminal = env.is_terminal(s)
        for a in range(env.spec.action_count):
            outs = [(1.0, s, 0.0, True)] if terminal else env._outcomes(s, a)
            for p, s2, r, done in outs:
                for _ in range(int(round(p * repeats))):
                    rows.append((s, a, s2, r, done))
    cols = list(zip(*rows))
    return TransitionDataset.from_arrays(env.spec, cols[0], cols[1], cols[2], cols[3], cols[4],
                                         policy_tag="exhaustive")
