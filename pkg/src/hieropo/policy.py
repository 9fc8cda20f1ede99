"""Pessimistic off-policy learners for multi-task linear bandits.

Each learner reduces the log to a per-task Gaussian over the task parameter
and scores an action by the lower confidence bound

    L_s(x, a) = phi(x, a)^T mean_s - alpha * sqrt(phi(x, a)^T cov_s phi(x, a)).

The learners differ only in which Gaussian they use:

* ``hier``   marginal task posterior with the shared mean integrated out
* ``flat``   independent per-task posteriors under prior N(mu_q, Sigma_q + Sigma_0)
* ``oracle`` conditional task posterior given the true shared mean
* ``single`` one task under an arbitrary Gaussian prior
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import (
    NORM_TOL,
    ConfigurationError,
    check_features,
    check_slates,
    check_spd,
    check_vector,
    max_row_norm,
    spd_inverse,
    symmetrize,
)
from .data import HierModelConfig, LoggedDataset
from .posterior import (
    TaskStatistics,
    compute_task_statistics,
    conditional_task_posterior,
    infer,
)

LEARNERS = ("hier", "flat", "oracle", "single")
POLICY_SCHEMA = "hieropo.policy/1"
DEFAULT_ALPHA = 0.1


@dataclass(frozen=True)
class RewardEstimate:
    r_hat: float
    width: float
    lcb: float
    alpha: float


@dataclass(frozen=True, eq=False)
class LearnedPolicy:
    """Per-task reward-model Gaussians plus the pessimism multiplier."""

    learner: str
    alpha: float
    means: NDArray[np.float64]
    covs: NDArray[np.float64]

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ConfigurationError(f"unknown learner tag {self.learner!r}")
        if not self.alpha >= 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float).reshape(means.shape[0], means.shape[1], means.shape[1])
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", symmetrize(covs))
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def m(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def _task(self, task_id: int) -> int:
        task_id = int(task_id)
        if not 0 <= task_id < self.m:
            raise ConfigurationError(f"task_id {task_id} outside [0, {self.m})")
        return task_id

    def estimate(self, task_id: int, slates: ArrayLike) -> tuple[NDArray, NDArray]:
        """Mean reward and interval width, each of shape (N, K), for N slates of one task."""
        s = self._task(task_id)
        slates = check_slates(slates, self.d)
        r_hat = slates @ self.means[s]
        quad = np.einsum("nki,ij,nkj->nk", slates, self.covs[s], slates)
        # round-off can push the quadratic form slightly negative
        width = self.alpha * np.sqrt(np.maximum(quad, 0.0))
        return r_hat, width

    def lcb(self, task_id: int, slates: ArrayLike) -> NDArray:
        r_hat, width = self.estimate(task_id, slates)
        return r_hat - width

    def score(self, task_id: int, slate: ArrayLike) -> list[RewardEstimate]:
        slate = np.asarray(slate, dtype=float)
        if slate.ndim != 2:
            raise ConfigurationError(f"a single slate must be (K, d), got {slate.shape}")
        check_slate_norms(slate)
        r_hat, width = self.estimate(task_id, slate)
        return [
            RewardEstimate(float(r), float(w), float(r - w), self.alpha)
            for r, w in zip(r_hat[0], width[0])
        ]

    def act(self, task_id: int, slates: ArrayLike) -> NDArray[np.int64] | int:
        """Index of the action with the largest LCB; ties go to the lowest index.

        Returns an int for one (K, d) slate and an array for a batch.
        """
        single = np.ndim(slates) == 2
        actions = np.argmax(self.lcb(task_id, slates), axis=1)
        return int(actions[0]) if single else actions

    def to_dict(self) -> dict:
        return {
            "schema": POLICY_SCHEMA,
            "learner": self.learner,
            "alpha": self.alpha,
            "d": self.d,
            "m": self.m,
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LearnedPolicy":
        if obj.get("schema", POLICY_SCHEMA) != POLICY_SCHEMA:
            raise ConfigurationError(f"unsupported policy schema {obj.get('schema')!r}")
        pol = cls(obj["learner"], obj["alpha"], np.asarray(obj["means"]), np.asarray(obj["covs"]))
        if pol.d != obj.get("d", pol.d) or pol.m != obj.get("m", pol.m):
            raise ConfigurationError("policy file header disagrees with its arrays")
        return pol

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LearnedPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _conjugate_update(prior_mean, prior_cov, prior_prec, stats: TaskStatistics):
    if stats.n_s == 0:
        return prior_mean.copy(), prior_cov.copy()
    cov = spd_inverse(prior_prec + stats.g)
    return cov @ (prior_prec @ prior_mean + stats.b), cov


def _stack(pairs, learner, alpha) -> LearnedPolicy:
    means = np.array([p[0] for p in pairs])
    covs = np.array([p[1] for p in pairs])
    return LearnedPolicy(learner, alpha, means, covs)


def fit_hieropo(dataset: LoggedDataset, config: HierModelConfig, alpha: float = DEFAULT_ALPHA) -> LearnedPolicy:
    post = infer(dataset, config)
    return _stack([(p.mean, p.cov) for p in post.marginals], "hier", alpha)


def fit_flatopo(dataset: LoggedDataset, config: HierModelConfig, alpha: float = DEFAULT_ALPHA) -> LearnedPolicy:
    prior_cov = symmetrize(config.sigma_q + config.sigma_0)
    prior_prec = spd_inverse(prior_cov)
    stats = compute_task_statistics(dataset, config)
    return _stack([_conjugate_update(config.mu_q, prior_cov, prior_prec, s) for s in stats], "flat", alpha)


def fit_oracleopo(
    dataset: LoggedDataset, config: HierModelConfig, alpha: float, mu_star: ArrayLike
) -> LearnedPolicy:
    mu_star = check_vector(mu_star, config.d, "mu_star")
    pairs = []
    for s in compute_task_statistics(dataset, config):
        cond = conditional_task_posterior(s, config)
        pairs.append((mu_star.copy() if s.n_s == 0 else cond.mean(mu_star), cond.cov))
    return _stack(pairs, "oracle", alpha)


def fit_single_task(
    dataset: LoggedDataset,
    prior_mean: ArrayLike,
    prior_cov: ArrayLike,
    sigma: float,
    alpha: float = DEFAULT_ALPHA,
) -> LearnedPolicy:
    """Bayesian linear regression on one task's records, scored pessimistically."""
    if len(dataset) and np.any(dataset.tasks != dataset.tasks[0]):
        raise ConfigurationError("fit_single_task needs records from exactly one task")
    d = dataset.d
    prior_mean = check_vector(prior_mean, d, "prior_mean")
    prior_cov = check_spd(prior_cov, d, "prior_cov")
    # reuse the hierarchical statistics code path with a one-task view
    one = LoggedDataset(
        np.zeros(len(dataset), int), dataset.actions, dataset.features, dataset.rewards,
        1, d, dataset.K, dataset.check_norms,
    )
    config = HierModelConfig(prior_mean, np.eye(d), prior_cov, sigma)
    (stats,) = compute_task_statistics(one, config)
    return _stack([_conjugate_update(prior_mean, prior_cov, config.prec_0, stats)], "single", alpha)


# ------------------------------------------------------------ estimator API


class _PessimisticOPO(BaseEstimator):
    """Shared fit/predict plumbing; subclasses implement ``_fit_log``."""

    def fit(self, X, y=None, tasks=None, n_tasks: int | None = None, n_actions: int = 1):
        """Fit from a :class:`LoggedDataset` or from arrays.

        Parameters
        ----------
        X : LoggedDataset or array-like of shape (n_samples, d)
            Feature vectors phi(X_t, A_t) of the logged actions.
        y : array-like of shape (n_samples,)
            Observed rewards.
        tasks : array-like of shape (n_samples,), optional
            0-based task id per record; all zeros when omitted.
        n_tasks : int, optional
            Number of tasks m. Defaults to ``max(tasks) + 1``. Tasks without
            records still get a (prior-only) policy.
        """
        if isinstance(X, LoggedDataset):
            dataset = X
        else:
            X = check_features(X)
            if y is None:
                raise ConfigurationError("y is required when X is an array")
            n = X.shape[0]
            tasks = np.zeros(n, int) if tasks is None else np.asarray(tasks, dtype=int)
            if n_tasks is None:
                n_tasks = int(tasks.max()) + 1 if n else 1
            dataset = LoggedDataset(tasks, np.zeros(n, int), X, np.asarray(y, float), n_tasks, X.shape[1], n_actions)
        self.policy_ = self._fit_log(dataset)
        self.n_features_in_ = dataset.d
        self.n_tasks_ = dataset.m
        return self

    def _per_slate(self, slates, tasks, fn):
        check_is_fitted(self, "policy_")
        slates = check_slates(slates, self.n_features_in_)
        tasks = np.broadcast_to(np.asarray(tasks, dtype=int), (slates.shape[0],))
        out = np.empty(slates.shape[:2])
        for s in np.unique(tasks):
            idx = tasks == s
            out[idx] = fn(int(s), slates[idx])
        return out

    def lower_confidence_bound(self, slates, tasks=0) -> NDArray:
        """LCB of every action, shape (N, K), for slates of shape (N, K, d)."""
        return self._per_slate(slates, tasks, lambda s, x: self.policy_.lcb(s, x))

    def predict_reward(self, slates, tasks=0) -> NDArray:
        return self._per_slate(slates, tasks, lambda s, x: self.policy_.estimate(s, x)[0])

    def predict(self, slates, tasks=0) -> NDArray[np.int64]:
        """Chosen (0-based) action for each slate."""
        return np.argmax(self.lower_confidence_bound(slates, tasks), axis=1)


class HierOPO(_PessimisticOPO):
    """Hierarchical pessimistic off-policy optimization.

    Parameters
    ----------
    model : HierModelConfig
        Known hyper-prior, task-prior covariance, and reward noise.
    alpha : float, default=0.1
        Pessimism multiplier on the posterior standard deviation.
    """

    def __init__(self, model: HierModelConfig, alpha: float = DEFAULT_ALPHA):
        self.model = model
        self.alpha = alpha

    def _fit_log(self, dataset):
        return fit_hieropo(dataset, self.model, self.alpha)


class FlatOPO(_PessimisticOPO):
    """Per-task pessimistic learner that folds the hyper-prior into the task prior."""

    def __init__(self, model: HierModelConfig, alpha: float = DEFAULT_ALPHA):
        self.model = model
        self.alpha = alpha

    def _fit_log(self, dataset):
        return fit_flatopo(dataset, self.model, self.alpha)


class OracleOPO(_PessimisticOPO):
    """Pessimistic learner given the true shared mean ``mu_star`` (simulation only)."""

    def __init__(self, model: HierModelConfig, mu_star, alpha: float = DEFAULT_ALPHA):
        self.model = model
        self.mu_star = mu_star
        self.alpha = alpha

    def _fit_log(self, dataset):
        return fit_oracleopo(dataset, self.model, self.alpha, self.mu_star)


class SingleTaskOPO(_PessimisticOPO):
    def __init__(self, prior_mean, prior_cov, sigma: float, alpha: float = DEFAULT_ALPHA):
        self.prior_mean = prior_mean
        self.prior_cov = prior_cov
        self.sigma = sigma
        self.alpha = alpha

    def _fit_log(self, dataset):
        return fit_single_task(dataset, self.prior_mean, self.prior_cov, self.sigma, self.alpha)


def make_learner(tag: str, model: HierModelConfig, alpha: float, mu_star=None) -> _PessimisticOPO:
    if tag == "hier":
        return HierOPO(model, alpha)
    if tag == "flat":
        return FlatOPO(model, alpha)
    if tag == "oracle":
        if mu_star is None:
            raise ConfigurationError("the oracle learner needs the true mu_star from an environment file")
        return OracleOPO(model, mu_star, alpha)
    raise ConfigurationError(f"unknown learner {tag!r}; choose from hier, flat, oracle")


def check_slate_norms(slate: ArrayLike) -> None:
    if max_row_norm(np.asarray(slate, dtype=float)) > 1 + NORM_TOL:
        raise ConfigurationError("slate has a feature row with norm > 1")
