"""Exact posterior inference for the two-level linear-Gaussian bandit model.

Every task s has sufficient statistics

    B_s = sigma^-2 sum_{t: S_t = s} phi_t y_t,    G_s = sigma^-2 sum_{t: S_t = s} phi_t phi_t^T.

From them we get the task posterior conditioned on the shared mean mu_*,
the posterior of mu_* itself, and the task posterior with mu_* integrated
out. ``joint_gaussian_oracle`` computes the last one by brute-force
conditioning of the full joint Gaussian and exists only to cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_factor, cho_solve

from ._validation import ConfigurationError, spd_inverse, symmetrize
from .data import HierModelConfig, LoggedDataset

ORACLE_MAX_SIZE = 2000


class OracleScaleError(ValueError):
    """The stacked joint Gaussian would be too large to build."""


@dataclass(frozen=True, eq=False)
class TaskStatistics:
    b: NDArray[np.float64]
    g: NDArray[np.float64]
    n_s: int


@dataclass(frozen=True, eq=False)
class ConditionalTaskPosterior:
    """N(mean(mu), cov) for theta_s given mu_* = mu and the task's own records."""

    cov: NDArray[np.float64]
    b: NDArray[np.float64]
    prec_0: NDArray[np.float64]

    def mean(self, mu: ArrayLike) -> NDArray[np.float64]:
        return self.cov @ (self.prec_0 @ np.asarray(mu, dtype=float) + self.b)

    @property
    def mean_operator(self) -> NDArray[np.float64]:
        """Linear map mu -> mean(mu) - mean(0), i.e. cov @ Sigma_0^-1."""
        return self.cov @ self.prec_0

    @property
    def offset(self) -> NDArray[np.float64]:
        return self.cov @ self.b


@dataclass(frozen=True, eq=False)
class HyperPosterior:
    mean: NDArray[np.float64]
    cov: NDArray[np.float64]


@dataclass(frozen=True, eq=False)
class MarginalTaskPosterior:
    mean: NDArray[np.float64]
    cov: NDArray[np.float64]


def _check_dims(dataset: LoggedDataset, config: HierModelConfig) -> None:
    if dataset.d != config.d:
        raise ConfigurationError(f"dataset has d={dataset.d} but model config has d={config.d}")


def compute_task_statistics(dataset: LoggedDataset, config: HierModelConfig) -> list[TaskStatistics]:
    """Sufficient statistics for every task in ``range(dataset.m)``, empty tasks included."""
    _check_dims(dataset, config)
    d = config.d
    scale = config.sigma**-2
    out = []
    for s in range(dataset.m):
        idx = np.flatnonzero(dataset.tasks == s)
        if idx.size == 0:
            out.append(TaskStatistics(np.zeros(d), np.zeros((d, d)), 0))
            continue
        X = dataset.features[idx]
        y = dataset.rewards[idx]
        out.append(TaskStatistics(scale * (X.T @ y), symmetrize(scale * (X.T @ X)), int(idx.size)))
    return out


def conditional_task_posterior(stats: TaskStatistics, config: HierModelConfig) -> ConditionalTaskPosterior:
    prec_0 = config.prec_0
    if stats.n_s == 0:
        return ConditionalTaskPosterior(config.sigma_0.copy(), stats.b, prec_0)
    cov = spd_inverse(prec_0 + stats.g)
    return ConditionalTaskPosterior(cov, stats.b, prec_0)


def _task_contribution(stats: TaskStatistics, config: HierModelConfig):
    """Task s as one noisy observation of mu_*: (precision, precision-weighted mean).

    Written as (G Sigma_0 + I)^-1 G and (G Sigma_0 + I)^-1 B so rank-deficient
    or zero G needs no inverse.
    """
    d = config.d
    lhs = stats.g @ config.sigma_0 + np.eye(d)
    sol = np.linalg.solve(lhs, np.column_stack([stats.g, stats.b]))
    return symmetrize(sol[:, :d]), sol[:, d]


def hyper_posterior(all_stats: Sequence[TaskStatistics], config: HierModelConfig) -> HyperPosterior:
    """Posterior N(mean, cov) of the shared mean mu_* given the whole log."""
    prec_q = config.prec_q
    prec = prec_q.copy()
    lin = prec_q @ config.mu_q
    observed = False
    # fixed task order keeps the reduction bit-stable
    for stats in all_stats:
        if stats.n_s == 0:
            continue
        observed = True
        p, h = _task_contribution(stats, config)
        prec += p
        lin += h
    if not observed:
        return HyperPosterior(config.mu_q.copy(), config.sigma_q.copy())
    c = cho_factor(symmetrize(prec), lower=True)
    cov = symmetrize(cho_solve(c, np.eye(config.d)))
    mean = cho_solve(c, lin)
    return HyperPosterior(mean, cov)


def marginal_task_posterior(
    stats: TaskStatistics, hyper: HyperPosterior, config: HierModelConfig
) -> MarginalTaskPosterior:
    return _marginalize(conditional_task_posterior(stats, config), hyper)


def _marginalize(cond: ConditionalTaskPosterior, hyper: HyperPosterior) -> MarginalTaskPosterior:
    # law of total covariance: E[Cov | mu] + Cov[E | mu]
    op = cond.mean_operator
    cov = symmetrize(cond.cov + op @ hyper.cov @ op.T)
    return MarginalTaskPosterior(cond.mean(hyper.mean), cov)


@dataclass(frozen=True, eq=False)
class HierarchicalPosterior:
    """All posterior pieces for one dataset, computed in a single pass."""

    stats: list[TaskStatistics]
    conditionals: list[ConditionalTaskPosterior]
    hyper: HyperPosterior
    marginals: list[MarginalTaskPosterior]


def infer(dataset: LoggedDataset, config: HierModelConfig) -> HierarchicalPosterior:
    stats = compute_task_statistics(dataset, config)
    conds = [conditional_task_posterior(s, config) for s in stats]
    hyper = hyper_posterior(stats, config)
    margs = [_marginalize(c, hyper) for c in conds]
    return HierarchicalPosterior(stats, conds, hyper, margs)


def joint_gaussian_oracle(dataset: LoggedDataset, config: HierModelConfig, task_id: int):
    """E[theta_s | D] and Cov[theta_s | D] by conditioning the stacked joint Gaussian.

    The joint is over (mu_*, theta_1..theta_m, y_1..y_n). It is written as an
    affine map of independent standard parts and conditioned on all rewards
    with one dense solve. Cost is cubic in n, so keep instances small.
    """
    _check_dims(dataset, config)
    m, d, n = dataset.m, config.d, len(dataset)
    if m * d + n > ORACLE_MAX_SIZE:
        raise OracleScaleError(f"m*d + n = {m * d + n} exceeds oracle limit {ORACLE_MAX_SIZE}")
    if not 0 <= task_id < m:
        raise ConfigurationError(f"task_id {task_id} outside [0, {m})")

    # latent w = (mu_*, eta_1..eta_m, eps_1..eps_n), independent blocks
    n_w = d + m * d + n
    cov_w = np.zeros((n_w, n_w))
    cov_w[:d, :d] = config.sigma_q
    for s in range(m):
        sl = slice(d + s * d, d + (s + 1) * d)
        cov_w[sl, sl] = config.sigma_0
    cov_w[d + m * d:, d + m * d:] = config.sigma**2 * np.eye(n)
    mean_w = np.zeros(n_w)
    mean_w[:d] = config.mu_q

    # theta_s = mu_* + eta_s
    A_theta = np.zeros((d, n_w))
    A_theta[:, :d] = np.eye(d)
    A_theta[:, d + task_id * d: d + (task_id + 1) * d] = np.eye(d)

    # y_t = phi_t^T (mu_* + eta_{S_t}) + eps_t
    A_y = np.zeros((n, n_w))
    for t in range(n):
        s = dataset.tasks[t]
        phi = dataset.features[t]
        A_y[t, :d] = phi
        A_y[t, d + s * d: d + (s + 1) * d] = phi
        A_y[t, d + m * d + t] = 1.0

    m_theta = A_theta @ mean_w
    if n == 0:
        return m_theta, symmetrize(A_theta @ cov_w @ A_theta.T)
    m_y = A_y @ mean_w
    C_tt = A_theta @ cov_w @ A_theta.T
    C_ty = A_theta @ cov_w @ A_y.T
    C_yy = A_y @ cov_w @ A_y.T
    c = cho_factor(symmetrize(C_yy), lower=True)
    mean = m_theta + C_ty @ cho_solve(c, dataset.rewards - m_y)
    cov = C_tt - C_ty @ cho_solve(c, C_ty.T)
    return mean, symmetrize(cov)
