"""Synthetic multi-task bandits, logged-data generation, and policy evaluation.

Random streams
--------------
All randomness comes from numpy's PCG64 seeded through ``SeedSequence``.
A stream is identified by ``(seed, run, purpose[, task])`` with purpose
0 = environment, 1 = logged data, 2 = evaluation. Streams for different
runs, purposes, or tasks never share state, so a run's environment does not
depend on ``n`` and paired comparisons across sweep values see the same
ground truth.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from ._validation import ConfigurationError
from .data import HierModelConfig, LoggedDataset
from .policy import LearnedPolicy, make_learner

ENV_SCHEMA = "hieropo.environment/1"
ENV_STREAM, LOG_STREAM, EVAL_STREAM = 0, 1, 2


def make_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, key)])))


@dataclass(frozen=True)
class SyntheticEnvConfig:
    d: int = 4
    K: int = 5
    m: int = 10
    n: int = 500
    sigma_q: float = 0.5
    sigma_0: float = 0.5
    sigma: float = 0.5
    seed: int = 0
    n_eval: int = 10_000

    def __post_init__(self):
        for name in ("d", "K", "m", "n_eval"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n < 0:
            raise ConfigurationError(f"n must be >= 0, got {self.n}")
        for name in ("sigma_q", "sigma_0", "sigma"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0, got {getattr(self, name)}")

    def model_config(self) -> HierModelConfig:
        return HierModelConfig.isotropic(self.d, self.sigma_q, self.sigma_0, self.sigma)


# ----------------------------------------------------------------- slates


@dataclass(frozen=True, eq=False)
class UniformSlates:
    """Every entry of every feature row i.i.d. Uniform[low, high]; rows above norm 1 are shrunk."""

    d: int
    K: int
    low: float = -0.5
    high: float = 0.5

    def sample(self, rng: np.random.Generator, n: int) -> NDArray[np.float64]:
        x = rng.uniform(self.low, self.high, size=(n, self.K, self.d))
        norms = np.linalg.norm(x, axis=-1, keepdims=True)
        return np.where(norms > 1.0, x / np.maximum(norms, 1.0), x)

    def to_dict(self) -> dict:
        return {"kind": "uniform", "d": self.d, "K": self.K, "low": self.low, "high": self.high}


@dataclass(frozen=True, eq=False)
class ItemSlates:
    """K distinct item feature rows drawn uniformly without replacement.

    ``items`` are already multiplied by ``scale``; ``scale`` is kept for reporting.
    """

    items: NDArray[np.float64]
    K: int
    scale: float = 1.0

    def __post_init__(self):
        items = np.asarray(self.items, dtype=float)
        if items.ndim != 2 or items.shape[0] < self.K:
            raise ConfigurationError(f"need at least K={self.K} items, got shape {items.shape}")
        object.__setattr__(self, "items", items)

    @property
    def d(self) -> int:
        return self.items.shape[1]

    def sample(self, rng: np.random.Generator, n: int) -> NDArray[np.float64]:
        keys = rng.random((n, self.items.shape[0]))
        idx = np.argpartition(keys, self.K - 1, axis=1)[:, : self.K]
        return self.items[idx]

    def to_dict(self) -> dict:
        return {"kind": "items", "K": self.K, "scale": self.scale, "items": self.items.tolist()}


def sampler_from_dict(obj: dict):
    if obj["kind"] == "uniform":
        return UniformSlates(int(obj["d"]), int(obj["K"]), float(obj["low"]), float(obj["high"]))
    if obj["kind"] == "items":
        return ItemSlates(np.asarray(obj["items"], dtype=float), int(obj["K"]), float(obj["scale"]))
    raise ConfigurationError(f"unknown slate sampler {obj['kind']!r}")


# ------------------------------------------------------------ environment


@dataclass(frozen=True, eq=False)
class Environment:
    """Ground truth of a multi-task bandit. Learners only ever see ``model``."""

    mu_star: NDArray[np.float64]
    thetas: NDArray[np.float64]
    sigma: float
    sampler: UniformSlates | ItemSlates
    model: HierModelConfig | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        object.__setattr__(self, "thetas", thetas)
        object.__setattr__(self, "mu_star", np.asarray(self.mu_star, dtype=float).reshape(thetas.shape[1]))
        if self.sampler.d != thetas.shape[1]:
            raise ConfigurationError(f"slate sampler d={self.sampler.d} but thetas have d={thetas.shape[1]}")

    @property
    def m(self) -> int:
        return self.thetas.shape[0]

    @property
    def d(self) -> int:
        return self.thetas.shape[1]

    @property
    def K(self) -> int:
        return self.sampler.K

    def optimal_policy(self) -> LearnedPolicy:
        """Greedy policy on the true parameters (zero covariance, alpha = 0)."""
        return LearnedPolicy("oracle", 0.0, self.thetas.copy(), np.zeros((self.m, self.d, self.d)))

    def to_dict(self) -> dict:
        out = {
            "schema": ENV_SCHEMA,
            "simulator_only": True,
            "m": self.m,
            "d": self.d,
            "K": self.K,
            "mu_star": self.mu_star.tolist(),
            "thetas": self.thetas.tolist(),
            "sigma": self.sigma,
            "sampler": self.sampler.to_dict(),
            "meta": self.meta,
        }
        if self.model is not None:
            out["model"] = self.model.to_dict()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "Environment":
        if obj.get("schema") != ENV_SCHEMA:
            raise ConfigurationError(f"not an environment file (schema {obj.get('schema')!r})")
        model = HierModelConfig.from_dict(obj["model"]) if "model" in obj else None
        return cls(
            np.asarray(obj["mu_star"], dtype=float), np.asarray(obj["thetas"], dtype=float),
            float(obj["sigma"]), sampler_from_dict(obj["sampler"]), model, obj.get("meta", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Environment":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sample_environment(config: SyntheticEnvConfig, rng: np.random.Generator) -> Environment:
    d, m = config.d, config.m
    mu_star = config.sigma_q * rng.standard_normal(d)
    thetas = mu_star + config.sigma_0 * rng.standard_normal((m, d))
    return Environment(
        mu_star, thetas, config.sigma, UniformSlates(d, config.K), config.model_config(),
        {"source": "synthetic", "config": asdict(config)},
    )


LoggingPolicy = Callable[[NDArray, NDArray, np.random.Generator], NDArray]


def uniform_logging(slates: NDArray, tasks: NDArray, rng: np.random.Generator) -> NDArray:
    return rng.integers(slates.shape[1], size=slates.shape[0])


def generate_log(
    env: Environment, n: int, rng: np.random.Generator, logging_policy: LoggingPolicy = uniform_logging
) -> LoggedDataset:
    """Draw ``n`` interactions: uniform task, fresh slate, logged action, Gaussian reward."""
    if n == 0:
        return LoggedDataset.empty(env.m, env.d, env.K)
    tasks = rng.integers(env.m, size=n)
    slates = env.sampler.sample(rng, n)
    actions = np.asarray(logging_policy(slates, tasks, rng), dtype=int)
    feats = slates[np.arange(n), actions]
    mean = np.einsum("nd,nd->n", feats, env.thetas[tasks])
    rewards = mean + env.sigma * rng.standard_normal(n)
    return LoggedDataset(tasks, actions, feats, rewards, env.m, env.d, env.K)


# ------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvaluationResult:
    value_opt: float
    value_learned: float
    suboptimality: float
    mc_std_error: float
    n_eval: int


def evaluate_on_slates(env: Environment, policy: LearnedPolicy, task_id: int, slates: NDArray) -> EvaluationResult:
    """Paired evaluation: learned and optimal actions are compared on the same slates."""
    true = slates @ env.thetas[task_id]
    chosen = policy.act(task_id, slates)
    n = slates.shape[0]
    v_opt = true.max(axis=1)
    v_learned = true[np.arange(n), chosen]
    diff = v_opt - v_learned
    se = float(diff.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return EvaluationResult(float(v_opt.mean()), float(v_learned.mean()), float(diff.mean()), se, n)


def evaluate_policy(
    env: Environment, policy: LearnedPolicy, task_id: int, n_eval: int, rng: np.random.Generator
) -> EvaluationResult:
    if n_eval < 1:
        raise ConfigurationError(f"n_eval must be >= 1, got {n_eval}")
    return evaluate_on_slates(env, policy, task_id, env.sampler.sample(rng, n_eval))


# ------------------------------------------------------------ experiments


@dataclass(frozen=True)
class RunResult:
    run_id: int
    learner: str
    task_suboptimality: tuple[float, ...]
    task_std_error: tuple[float, ...]

    @property
    def mean_suboptimality(self) -> float:
        return float(np.mean(self.task_suboptimality))

    @property
    def std_error(self) -> float:
        """Monte Carlo standard error of the per-run mean over tasks."""
        se = np.asarray(self.task_std_error)
        return float(np.sqrt(np.sum(se**2)) / se.size)


def fit_learners(
    log: LoggedDataset, model: HierModelConfig, learners: Sequence[str], alpha: float, env: Environment
) -> dict[str, LearnedPolicy]:
    out = {}
    for tag in learners:
        mu_star = env.mu_star if tag == "oracle" else None
        out[tag] = make_learner(tag, model, alpha, mu_star).fit(log).policy_
    return out


def run_once(
    config: SyntheticEnvConfig,
    learners: Sequence[str],
    run_id: int,
    alpha: float = 0.1,
    make_env: Callable[[np.random.Generator], Environment] | None = None,
    observer: Callable | None = None,
) -> list[RunResult]:
    """One run: fresh environment and log, every learner evaluated on common slates.

    ``observer(run_id, env, policies, task_id, slates)`` is called once per task
    with the exact slates used for scoring, for diagnostics.
    """
    env_rng = make_rng(config.seed, run_id, ENV_STREAM)
    env = make_env(env_rng) if make_env else sample_environment(config, env_rng)
    log = generate_log(env, config.n, make_rng(config.seed, run_id, LOG_STREAM))
    policies = fit_learners(log, env.model, learners, alpha, env)
    subs = {tag: [] for tag in learners}
    ses = {tag: [] for tag in learners}
    for s in range(env.m):
        slates = env.sampler.sample(make_rng(config.seed, run_id, EVAL_STREAM, s), config.n_eval)
        if observer is not None:
            observer(run_id, env, policies, s, slates)
        for tag in learners:
            r = evaluate_on_slates(env, policies[tag], s, slates)
            subs[tag].append(r.suboptimality)
            ses[tag].append(r.mc_std_error)
    return [RunResult(run_id, tag, tuple(subs[tag]), tuple(ses[tag])) for tag in learners]


@dataclass(frozen=True)
class LearnerSummary:
    learner: str
    mean: float
    std_error: float
    n_runs: int


def summarize(runs: Sequence[RunResult]) -> dict[str, LearnerSummary]:
    by = {}
    for r in runs:
        by.setdefault(r.learner, []).append(r.mean_suboptimality)
    out = {}
    for tag, vals in by.items():
        vals = np.asarray(vals)
        se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        out[tag] = LearnerSummary(tag, float(vals.mean()), se, int(vals.size))
    return out


def run_experiment(
    config: SyntheticEnvConfig,
    learners: Sequence[str] = ("oracle", "hier", "flat"),
    n_runs: int = 30,
    alpha: float = 0.1,
    threads: int = 1,
    make_env: Callable[[np.random.Generator], Environment] | None = None,
    observer: Callable | None = None,
) -> tuple[list[RunResult], dict[str, LearnerSummary]]:
    """Independent runs, aggregated in run order regardless of thread count."""
    if n_runs < 1:
        raise ConfigurationError(f"n_runs must be >= 1, got {n_runs}")

    def one(run_id):
        return run_once(config, learners, run_id, alpha, make_env, observer)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            nested = list(pool.map(one, range(n_runs)))
    else:
        nested = [one(r) for r in range(n_runs)]
    runs = [r for batch in nested for r in batch]
    return runs, summarize(runs)


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: int
    learner: str
    n: int
    m: int
    sigma_q: float
    run_id: int
    mean_suboptimality: float
    se: float


def run_sweep(
    config: SyntheticEnvConfig,
    axis: str,
    values: Sequence[int],
    learners: Sequence[str] = ("oracle", "hier", "flat"),
    n_runs: int = 30,
    alpha: float = 0.1,
    threads: int = 1,
) -> list[SweepRow]:
    if axis not in ("n", "m"):
        raise ConfigurationError(f"sweep axis must be 'n' or 'm', got {axis!r}")
    values = list(values)
    if not values or any(v <= 0 for v in values) or any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigurationError("sweep values must be strictly increasing positive integers")
    rows = []
    for v in values:
        cfg = replace(config, **{axis: int(v)})
        runs, _ = run_experiment(cfg, learners, n_runs, alpha, threads)
        for r in runs:
            rows.append(SweepRow(axis, int(v), r.learner, cfg.n, cfg.m, cfg.sigma_q, r.run_id,
                                 r.mean_suboptimality, r.std_error))
    return rows


def aggregate_sweep(rows: Sequence[SweepRow]) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r.value, r.learner), []).append(r.mean_suboptimality)
    out = []
    for (value, learner), vals in groups.items():
        vals = np.asarray(vals)
        se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
        out.append({"value": value, "learner": learner, "mean": float(vals.mean()), "se": se, "n_runs": int(vals.size)})
    return out
