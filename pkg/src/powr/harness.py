"""Experiment orchestration: alternate data collection, world-model fits and PMD.

Each round collects ``collect_steps`` environment steps with the current policy
(mixed with exploratory actions), refits the world model on everything
collected so far, runs ``pmd_iters`` POWR iterations warm-started from the
previous policy, and evaluates the result.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .env import Env, TransitionDataset, exact_dynamics, make_env, make_rng, run_episode, sample_action
from .errors import ConfigError
from .kernels import Kernel
from .oracle import TabularMDP, exact_q
from .pmd import PolicyWeights, SoftmaxPolicy, run_pmd, write_jsonl
from .worldmodel import QEstimate, WorldModel, estimate_q, fit

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)


@dataclass
class KernelConfig:
    family: str = "onehot"
    sigma: float = 1.0
    length_scales: list[float] | None = None

    def build(self) -> Kernel:
        return Kernel(self.family, self.sigma, tuple(self.length_scales) if self.length_scales else None)


@dataclass
class ExperimentConfig:
    env: str = "gridworld4"
    kernel: KernelConfig = field(default_factory=KernelConfig)
    lam: float = 1e-6
    gamma: float | None = None  # None: the environment's default
    eta: float = 1.0
    rounds: list[list[int]] = field(default_factory=lambda: [[1000, 10]])
    eval_episodes: int = 100
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str | None = None
    epsilon: float = 0.1
    epsilon_decay: float = 0.7
    exploration: str = "uniform"  # or "persistent": exploratory actions are held for ~persistence steps
    persistence: float = 20.0
    n_max: int = 4000
    dedup: bool | None = None  # None: merge duplicates iff the kernel is one-hot
    warm_start: bool = True
    track_epsilon: bool = False
    max_episode_steps: int | None = None

    def __post_init__(self):
        if isinstance(self.kernel, dict):
            self.kernel = KernelConfig(**self.kernel)
        self.rounds = [list(map(int, r)) for r in self.rounds]
        self.validate()

    def validate(self):
        if not self.rounds:
            raise ConfigError("at least one round is required")
        for collect, iters in self.rounds:
            if collect <= 0 or iters < 0:
                raise ConfigError(f"bad round {[collect, iters]}: collect_steps > 0, pmd_iters >= 0")
        if self.lam <= 0 or self.eta < 0 or self.eval_episodes <= 0 or self.n_max <= 0:
            raise ConfigError("lam, eval_episodes and n_max must be positive, eta non-negative")
        if self.gamma is not None and not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        if self.exploration not in ("uniform", "persistent"):
            raise ConfigError("exploration must be 'uniform' or 'persistent'")
        if not 0 <= self.epsilon <= 1:
            raise ConfigError("epsilon must lie in [0, 1]")
        try:
            self.kernel.build()
            self.make_env()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def total_timesteps(self) -> int:
        return sum(r[0] for r in self.rounds)

    def to_dict(self) -> dict:
        def drop_none(d):
            return {k: drop_none(v) if isinstance(v, dict) else v for k, v in d.items() if v is not None}
        return drop_none(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "kernel" in d:
            kknown = {f.name for f in dataclasses.fields(KernelConfig)}
            bad = set(d["kernel"]) - kknown
            if bad:
                raise ConfigError(f"unknown kernel keys: {sorted(bad)}")
        try:
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def from_toml(cls, path, overrides: list[str] | tuple[str, ...] = ()) -> "ExperimentConfig":
        """Load a TOML config, apply ``key=value`` overrides (dotted keys for nested tables)."""
        path = resolve_config(path)
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for item in overrides:
            apply_override(data, item)
        return cls.from_dict(data)

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def make_env(self) -> Env:
        kwargs = {}
        if self.gamma is not None:
            kwargs["gamma"] = self.gamma
        if self.max_episode_steps is not None:
            kwargs["max_episode_steps"] = self.max_episode_steps
        return make_env(self.env, **kwargs)


BUNDLED = Path(__file__).parent / "configs"


def resolve_config(path) -> Path:
    """A config path, falling back to the bundled configs (``gridworld``, ``taxi.toml``, ...)."""
    p = Path(path)
    if p.is_file():
        return p
    name = p.name if p.suffix == ".toml" else p.name + ".toml"
    if (BUNDLED / name).is_file() and len(p.parts) == 1:
        return BUNDLED / name
    raise ConfigError(f"config file not found: {path}")


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(data: dict, item: str) -> None:
    """Set ``a.b=value`` in a nested config dict; the key must exist in the config schema."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, text = item.split("=", 1)
    parts = key.strip().split(".")
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    if parts[0] not in fields:
        raise ConfigError(f"unknown config key {key!r}")
    if len(parts) > 2 or (len(parts) == 2 and parts[0] != "kernel"):
        raise ConfigError(f"unknown config key {key!r}")
    if len(parts) == 2 and parts[1] not in {f.name for f in dataclasses.fields(KernelConfig)}:
        raise ConfigError(f"unknown config key {key!r}")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = _parse_value(text.strip())


@dataclass
class CurvePoint:
    timesteps: int
    mean: float
    min: float
    max: float
    seed: int
    wall_time: float
    n_anchors: int = 0
    epsilon: float | None = None


@dataclass
class TrainingCurve:
    points: list[CurvePoint] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    policy: SoftmaxPolicy | None = None
    failed: str | None = None

    def add(self, point: CurvePoint):
        if self.points and point.timesteps <= self.points[-1].timesteps:
            raise ValueError("checkpoint timesteps must increase")
        self.points.append(point)

    @property
    def final_mean(self) -> float:
        return self.points[-1].mean

    def to_csv(self, path, mode="w", header=True):
        with open(path, mode, newline="") as fh:
            w = csv.writer(fh)
            if header:
                w.writerow(["timesteps", "mean", "min", "max", "seed"])
            for p in self.points:
                w.writerow([p.timesteps, repr(p.mean), repr(p.min), repr(p.max), p.seed])


def aggregate_curves(curves: list[TrainingCurve]) -> list[tuple[int, float, float, float]]:
    """Mean and min/max of the per-seed mean returns at each shared checkpoint."""
    rows = []
    for pts in zip(*(c.points for c in curves)):
        means = [p.mean for p in pts]
        rows.append((pts[0].timesteps, float(np.mean(means)), float(np.min(means)), float(np.max(means))))
    return rows


# -- data collection ---------------------------------------------------------

class _Behaviour:
    """Current policy mixed with exploratory actions.

    With probability ``epsilon`` the step is exploratory.  Exploratory actions
    are uniform; in ``persistent`` mode the exploratory action is kept and
    only resampled with probability ``1 / persistence`` per step.
    """

    def __init__(self, env: Env, policy: SoftmaxPolicy, epsilon: float, mode: str, persistence: float):
        self.na = env.spec.action_count
        self.policy = policy
        self.epsilon = epsilon
        self.mode = mode
        self.switch = 1.0 / max(persistence, 1.0)
        self.held = None
        self.table = policy_table(policy, env) if env.discrete else None

    def start_episode(self):
        self.held = None

    def __call__(self, state, rng):
        if self.mode == "persistent":
            if self.held is None or rng.random() < self.switch:
                self.held = int(rng.integers(self.na))
        if self.epsilon > 0 and rng.random() < self.epsilon:
            return self.held if self.mode == "persistent" else int(rng.integers(self.na))
        if self.table is not None:
            return sample_action(self.table[int(state)], rng)
        return sample_action(self.policy(state), rng)


def policy_table(policy: SoftmaxPolicy, env: Env) -> np.ndarray:
    """Action probabilities at every state of a discrete environment."""
    return policy.probs(np.arange(env.spec.n_states, dtype=float)[:, None])


def collect(env: Env, policy: SoftmaxPolicy, steps: int, rng: np.random.Generator, dataset: TransitionDataset,
            epsilon: float = 0.0, exploration: str = "uniform", persistence: float = 20.0) -> int:
    """Append ``steps`` transitions gathered episode by episode; returns the number of episodes."""
    behaviour = _Behaviour(env, policy, epsilon, exploration, persistence)
    remaining, episodes = steps, 0
    while remaining > 0:
        behaviour.start_episode()
        horizon = min(env.spec.max_episode_steps, remaining)
        _, _, used = run_episode(env, behaviour, horizon, rng, dataset)
        remaining -= used
        episodes += 1
    return episodes


def evaluate(policy, env: Env, episodes: int, seed: int) -> tuple[float, float, float]:
    """Mean, min and max undiscounted return over ``episodes`` runs, sampling actions from the policy."""
    rng = make_rng(seed, 0xE7A1)
    table = policy_table(policy, env) if env.discrete and isinstance(policy, SoftmaxPolicy) else None

    def choose(state, rng):
        p = table[int(state)] if table is not None else np.asarray(policy(state))
        return sample_action(p, rng)

    returns = [run_episode(env, choose, env.spec.max_episode_steps, rng)[1] for _ in range(episodes)]
    return float(np.mean(returns)), float(np.min(returns)), float(np.max(returns))


# -- oracle diagnostics ------------------------------------------------------

def _sup_error(q_hat: np.ndarray, q: np.ndarray, mdp: TabularMDP) -> float:
    live = ~mdp.terminal
    if not live.any():
        return float(np.max(np.abs(q_hat - q)))
    return float(np.max(np.abs(q_hat[live] - q[live])))


def track_epsilon(model: WorldModel, mdp: TabularMDP, policy, gamma: float | None = None,
                  qest: QEstimate | None = None) -> float:
    """Sup-norm error of the world-model action values against the exact ones.

    ``policy`` is a ``SoftmaxPolicy`` or an ``|X| x |A|`` probability table.
    The supremum runs over non-terminal states (absorbing states are never
    acted in).
    """
    gamma = mdp.gamma if gamma is None else gamma
    states = np.arange(mdp.n_states, dtype=float)[:, None]
    table = policy.probs(states) if isinstance(policy, SoftmaxPolicy) else np.asarray(policy, dtype=float)
    if qest is None:
        evolved = model.evolved_states[:, 0].astype(int)
        qest = estimate_q(model, table[evolved], gamma)
    return _sup_error(qest.values(states), exact_q(mdp, table), mdp)


# -- warm start ----------------------------------------------------------------

def reproject(policy: SoftmaxPolicy, model: WorldModel, eta: float, ridge: float = 1e-8) -> np.ndarray:
    """Weights for ``model`` whose softmax reproduces ``policy`` at the anchor states.

    Solves ``(K_states + ridge I) C = logits / eta`` where ``K_states`` is the
    state kernel between anchors and the logits are the old policy's logits at
    the new anchors.
    """
    if eta == 0 or len(policy.anchor_states) == 0:
        return np.zeros((model.n, model.action_count))
    target = policy.logits(model.anchor_states) / eta
    if model.is_sparse:
        Ks = model.kernel.gram_sparse(model.anchor_states)
        A = (Ks + ridge * sparse.identity(model.n)).tocsc()
        lu = splinalg.splu(A)
        return np.column_stack([lu.solve(target[:, j]) for j in range(target.shape[1])])
    Ks = model.kernel.gram(model.anchor_states)
    Ks[np.diag_indices_from(Ks)] += ridge * max(1.0, model.n)
    return np.linalg.solve(Ks, target)


# -- experiment ----------------------------------------------------------------

def _epsilon_tracker(mdp: TabularMDP, gamma: float):
    def eps_fn(weights: PolicyWeights, q: QEstimate) -> float:
        return track_epsilon(q.model, mdp, SoftmaxPolicy.from_weights(weights), gamma, qest=q)
    return eps_fn


def _subsample(dataset: TransitionDataset, n_max: int, rng: np.random.Generator) -> TransitionDataset:
    if len(dataset) <= n_max:
        return dataset
    idx = np.sort(rng.choice(len(dataset), size=n_max, replace=False))
    return dataset.subset(idx)


def run_seed(config: ExperimentConfig, seed: int, diagnostics_path=None) -> TrainingCurve:
    """Run the full collect/fit/PMD schedule for one seed."""
    env = config.make_env()
    spec = env.spec
    gamma = spec.gamma
    kernel = config.kernel.build()
    dedup = kernel.is_onehot if config.dedup is None else config.dedup
    mdp = exact_dynamics(env) if (config.track_epsilon and env.discrete) else None
    dataset = TransitionDataset(spec, seed=seed, policy_tag="powr")
    policy = SoftmaxPolicy.uniform(spec.action_count, spec.state_dim)
    curve = TrainingCurve()
    timesteps = 0
    epsilon = config.epsilon
    start = time.perf_counter()
    for rnd, (collect_steps, pmd_iters) in enumerate(config.rounds):
        rng = make_rng(seed, rnd)
        eps_round = 1.0 if rnd == 0 else epsilon
        collect(env, policy, collect_steps, rng, dataset, eps_round, config.exploration, config.persistence)
        timesteps += collect_steps
        if rnd > 0:
            epsilon *= config.epsilon_decay
        train = dataset if dedup else _subsample(dataset, config.n_max, make_rng(seed, rnd, 1))
        model = fit(train, kernel, config.lam, dedup=dedup)
        eps_final = None
        if pmd_iters > 0:
            C0 = reproject(policy, model, config.eta) if config.warm_start else None
            weights = PolicyWeights(C0, config.eta, model) if C0 is not None else None
            eps_fn = None
            if mdp is not None:
                eps_fn = _epsilon_tracker(mdp, gamma)
            try:
                policy, records, _ = run_pmd(model, gamma, config.eta, pmd_iters, weights=weights, epsilon_fn=eps_fn)
            except ArithmeticError as exc:
                curve.failed = f"round {rnd}: {exc}"
                log.error("seed %d %s", seed, curve.failed)
                raise
            for rec in records:
                row = dataclasses.asdict(rec)
                row.update(seed=seed, round=rnd, timesteps=timesteps)
                curve.diagnostics.append(row)
            if records and records[-1].epsilon is not None:
                eps_final = records[-1].epsilon
        mean, lo, hi = evaluate(policy, env, config.eval_episodes, seed=seed * 1000 + rnd)
        curve.add(CurvePoint(timesteps, mean, lo, hi, seed, time.perf_counter() - start, model.n, eps_final))
        log.info("seed %d round %d: t=%d n=%d mean=%.3f", seed, rnd, timesteps, model.n, mean)
    curve.policy = policy
    if diagnostics_path is not None:
        write_jsonl(diagnostics_path, curve.diagnostics)
    return curve


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> list[TrainingCurve]:
    """Run every seed (in parallel when ``jobs > 1``) and write outputs if ``config.out`` is set."""
    if jobs > 1 and len(config.seeds) > 1:
        from joblib import Parallel, delayed
        curves = Parallel(n_jobs=jobs)(delayed(run_seed)(config, s) for s in config.seeds)
    else:
        curves = [run_seed(config, s) for s in config.seeds]
    if config.out:
        write_outputs(config, curves)
    return curves


def write_outputs(config: ExperimentConfig, curves: list[TrainingCurve]) -> None:
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timesteps", "mean", "min", "max", "seed"])
        for c in curves:
            for p in c.points:
                w.writerow([p.timesteps, repr(p.mean), repr(p.min), repr(p.max), p.seed])
        for t, mean, lo, hi in aggregate_curves(curves):
            w.writerow([t, repr(mean), repr(lo), repr(hi), "all"])
    with open(out / "diagnostics.jsonl", "w") as fh:
        for c in curves:
            for row in c.diagnostics:
                fh.write(json.dumps(row) + "\n")
    for c in curves:
        if c.policy is not None and c.points:
            c.policy.save(out / f"policy_seed{c.points[0].seed}.npz", env=config.env)
    with open(out / "config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)
