"""Recommender-style data preparation for the hierarchical bandit model.

Pipeline: ratings -> ALS factorization M ~ U V^T -> Gaussian mixture on the
user factors -> hyper-prior from the mixture centers, task prior from the
largest cluster -> bandit environment whose tasks are users of that cluster
and whose actions are item factor rows.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import ConfigurationError, symmetrize
from .data import HierModelConfig
from .envsim import Environment, ItemSlates

logger = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-6
CENTER_JITTER = 1e-6


class PipelineError(RuntimeError):
    """A recsys pipeline stage failed; the message starts with the stage name."""


# ---------------------------------------------------------------- ratings


@dataclass(frozen=True, eq=False)
class RatingsMatrix:
    """Sparse (user, item, rating) triples with dense 0-based ids."""

    users: NDArray[np.int64]
    items: NDArray[np.int64]
    ratings: NDArray[np.float64]
    n_users: int
    n_items: int
    user_ids: NDArray | None = None
    item_ids: NDArray | None = None

    def __post_init__(self):
        u = np.asarray(self.users, dtype=np.int64)
        i = np.asarray(self.items, dtype=np.int64)
        r = np.asarray(self.ratings, dtype=float)
        if not (u.shape == i.shape == r.shape) or u.ndim != 1:
            raise ConfigurationError("users, items, ratings must be 1-D arrays of equal length")
        if u.size and (u.min() < 0 or u.max() >= self.n_users or i.min() < 0 or i.max() >= self.n_items):
            raise ConfigurationError("user or item id out of range")
        if np.unique(u * self.n_items + i).size != u.size:
            raise ConfigurationError("duplicate (user, item) pairs")
        object.__setattr__(self, "users", u)
        object.__setattr__(self, "items", i)
        object.__setattr__(self, "ratings", r)

    def __len__(self) -> int:
        return self.ratings.size

    @classmethod
    def from_triples(cls, users: ArrayLike, items: ArrayLike, ratings: ArrayLike) -> "RatingsMatrix":
        """Remap arbitrary user and item labels to dense ids."""
        user_ids, u = np.unique(np.asarray(users), return_inverse=True)
        item_ids, i = np.unique(np.asarray(items), return_inverse=True)
        return cls(u, i, np.asarray(ratings, dtype=float), user_ids.size, item_ids.size, user_ids, item_ids)

    @classmethod
    def from_dense(cls, M: ArrayLike, mask: ArrayLike | None = None) -> "RatingsMatrix":
        M = np.asarray(M, dtype=float)
        mask = np.ones(M.shape, bool) if mask is None else np.asarray(mask, bool)
        u, i = np.nonzero(mask)
        return cls(u, i, M[u, i], M.shape[0], M.shape[1])


def read_ratings(path: str | Path) -> RatingsMatrix:
    """Read ``user::item::rating[::timestamp]`` lines or CSV ``user,item,rating[,...]``.

    A CSV header row is skipped when its rating field is not numeric.
    """
    path = Path(path)
    users, items, ratings = [], [], []
    with path.open() as fh:
        first = fh.readline()
        fh.seek(0)
        if "::" in first:
            rows = (line.rstrip("\n").split("::") for line in fh)
        else:
            rows = csv.reader(fh)
        for lineno, row in enumerate(rows, start=1):
            if not row or not "".join(row).strip():
                continue
            try:
                rating = float(row[2])
            except (IndexError, ValueError) as exc:
                if lineno == 1:
                    continue
                raise ConfigurationError(f"{path}:{lineno}: bad ratings row {row!r}") from exc
            users.append(row[0].strip())
            items.append(row[1].strip())
            ratings.append(rating)
    if not ratings:
        raise ConfigurationError(f"{path}: no ratings found")
    return RatingsMatrix.from_triples(users, items, ratings)


def synthetic_ratings(
    n_users: int = 200,
    n_items: int = 100,
    rank: int = 4,
    n_clusters: int = 3,
    density: float = 0.5,
    noise: float = 0.1,
    seed: int = 0,
) -> tuple[RatingsMatrix, NDArray, NDArray]:
    """Low-rank ratings with clustered user factors; returns (ratings, U_true, V_true).

    Every user and item gets at least one rating.
    """
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(n_clusters, rank))
    labels = rng.integers(n_clusters, size=n_users)
    U = centers[labels] + 0.3 * rng.standard_normal((n_users, rank))
    V = rng.normal(0.0, 1.0 / math.sqrt(rank), size=(n_items, rank))
    mask = rng.random((n_users, n_items)) < density
    mask[np.arange(n_users), rng.integers(n_items, size=n_users)] = True
    mask[rng.integers(n_users, size=n_items), np.arange(n_items)] = True
    M = U @ V.T + noise * rng.standard_normal((n_users, n_items))
    return RatingsMatrix.from_dense(M, mask), U, V


# -------------------------------------------------------------------- ALS


@dataclass(frozen=True, eq=False)
class Factorization:
    U: NDArray[np.float64]
    V: NDArray[np.float64]
    rank: int
    reg: float
    rmse_trace: list[float]
    objective_trace: list[float] = field(default_factory=list)

    def predict(self, users: ArrayLike, items: ArrayLike) -> NDArray:
        return np.einsum("nd,nd->n", self.U[np.asarray(users)], self.V[np.asarray(items)])

    def to_dict(self) -> dict:
        return {
            "rank": self.rank, "reg": self.reg, "U": self.U.tolist(), "V": self.V.tolist(),
            "rmse_trace": self.rmse_trace, "objective_trace": self.objective_trace,
        }


def _groups(keys: NDArray, n: int) -> list[NDArray]:
    order = np.argsort(keys, kind="stable")
    bounds = np.searchsorted(keys[order], np.arange(n + 1))
    return [order[bounds[k]: bounds[k + 1]] for k in range(n)]


def _ridge_rows(groups, other_idx, other, ratings, reg, rank) -> NDArray:
    out = np.zeros((len(groups), rank))
    regI = reg * np.eye(rank)
    for k, idx in enumerate(groups):
        if idx.size == 0:
            continue
        M = other[other_idx[idx]]
        c = cho_factor(M.T @ M + regI, lower=True)
        out[k] = cho_solve(c, M.T @ ratings[idx])
    return out


def als_objective(R: RatingsMatrix, U: NDArray, V: NDArray, reg: float) -> float:
    resid = R.ratings - np.einsum("nd,nd->n", U[R.users], V[R.items])
    return float(resid @ resid + reg * (np.sum(U * U) + np.sum(V * V)))


def _rmse(R: RatingsMatrix, U: NDArray, V: NDArray) -> float:
    resid = R.ratings - np.einsum("nd,nd->n", U[R.users], V[R.items])
    return float(math.sqrt(np.mean(resid**2)))


def als_factorize(
    ratings: RatingsMatrix, rank: int = 10, reg: float = 0.1, sweeps: int = 20, seed: int = 0
) -> Factorization:
    """Alternating ridge solves for U and V.

    Each half-sweep minimizes sum (r_ij - U_i.V_j)^2 + reg(|U|^2 + |V|^2)
    exactly over one factor, so the objective never increases.
    """
    if reg <= 0:
        raise ConfigurationError("ALS needs reg > 0 to keep every row solve nonsingular")
    counts_u = np.bincount(ratings.users, minlength=ratings.n_users)
    counts_i = np.bincount(ratings.items, minlength=ratings.n_items)
    if np.any(counts_u == 0) or np.any(counts_i == 0):
        raise ConfigurationError("every user and item needs at least one rating")
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(rank)
    U = rng.normal(0.0, scale, size=(ratings.n_users, rank))
    V = rng.normal(0.0, scale, size=(ratings.n_items, rank))
    by_user = _groups(ratings.users, ratings.n_users)
    by_item = _groups(ratings.items, ratings.n_items)
    objective = [als_objective(ratings, U, V, reg)]
    rmse = []
    for _ in range(sweeps):
        U = _ridge_rows(by_user, ratings.items, V, ratings.ratings, reg, rank)
        objective.append(als_objective(ratings, U, V, reg))
        V = _ridge_rows(by_item, ratings.users, U, ratings.ratings, reg, rank)
        objective.append(als_objective(ratings, U, V, reg))
        rmse.append(_rmse(ratings, U, V))
    return Factorization(U, V, rank, reg, rmse, objective)


class ALSFactorizer(BaseEstimator):
    """Estimator wrapper around :func:`als_factorize`."""

    def __init__(self, rank: int = 10, reg: float = 0.1, sweeps: int = 20, random_state: int = 0):
        self.rank = rank
        self.reg = reg
        self.sweeps = sweeps
        self.random_state = random_state

    def fit(self, X: RatingsMatrix, y=None):
        self.factorization_ = als_factorize(X, self.rank, self.reg, self.sweeps, self.random_state)
        self.user_factors_ = self.factorization_.U
        self.item_factors_ = self.factorization_.V
        return self

    def predict(self, users, items) -> NDArray:
        check_is_fitted(self, "factorization_")
        return self.factorization_.predict(users, items)


# -------------------------------------------------------------------- GMM


@dataclass(frozen=True, eq=False)
class GmmFit:
    weights: NDArray[np.float64]
    means: NDArray[np.float64]
    covariances: NDArray[np.float64]
    log_likelihood_trace: list[float]
    converged: bool
    n_reinit: int = 0

    @property
    def k(self) -> int:
        return self.weights.size

    def log_resp(self, X: NDArray) -> tuple[NDArray, NDArray]:
        """Per-point log responsibilities and log-likelihoods."""
        logp = _component_logpdf(X, self.means, self.covariances) + np.log(self.weights)
        ll = logsumexp(logp, axis=1)
        return logp - ll[:, None], ll

    def predict(self, X: ArrayLike) -> NDArray[np.int64]:
        return np.argmax(self.log_resp(np.asarray(X, dtype=float))[0], axis=1)


def _component_logpdf(X: NDArray, means: NDArray, covs: NDArray) -> NDArray:
    n, d = X.shape
    out = np.empty((n, means.shape[0]))
    for j, (mu, cov) in enumerate(zip(means, covs)):
        L = np.linalg.cholesky(cov)
        z = np.linalg.solve(L, (X - mu).T)
        out[:, j] = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * d * math.log(2 * math.pi)
    return out


def _kmeanspp(X: NDArray, k: int, rng: np.random.Generator) -> NDArray:
    centers = [X[rng.integers(X.shape[0])]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(X.shape[0], p=d2 / total) if total > 0 else rng.integers(X.shape[0])
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _floor_cov(cov: NDArray, reg: float) -> NDArray:
    cov = symmetrize(cov)
    if np.linalg.eigvalsh(cov)[0] < reg:
        cov = cov + reg * np.eye(cov.shape[0])
    return cov


def _m_step(X, resp, reg):
    nk = resp.sum(axis=0)
    means = (resp.T @ X) / nk[:, None]
    covs = np.empty((nk.size, X.shape[1], X.shape[1]))
    for j in range(nk.size):
        diff = X - means[j]
        covs[j] = _floor_cov((resp[:, j, None] * diff).T @ diff / nk[j], reg)
    return nk / X.shape[0], means, covs


def gmm_fit(
    points: ArrayLike, k: int = 7, max_iters: int = 200, tol: float = 1e-8, seed: int = 0, reg: float = 1e-6
) -> GmmFit:
    """Full-covariance Gaussian mixture by EM with k-means++ starting centers.

    ``log_likelihood_trace`` holds the mean per-point log-likelihood before
    each M-step. A covariance gets ``reg * I`` added only when its smallest
    eigenvalue falls below ``reg``.
    """
    X = check_array(points, dtype=np.float64)
    n, d = X.shape
    if k < 1 or n < k:
        raise ConfigurationError(f"need 1 <= k <= n points, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(X, k, rng)
    labels = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((n, k))
    resp[np.arange(n), labels] = 1.0
    # an empty initial cluster keeps its center with unit mass spread evenly
    resp[:, resp.sum(axis=0) == 0] = 1.0 / n
    resp /= resp.sum(axis=1, keepdims=True)
    weights, means, covs = _m_step(X, resp, reg)
    trace: list[float] = []
    converged = False
    n_reinit = 0
    global_cov = _floor_cov(np.cov(X.T, bias=True).reshape(d, d), reg)
    for _ in range(max_iters):
        fit = GmmFit(weights, means, covs, trace, False)
        log_resp, ll = fit.log_resp(X)
        trace.append(float(ll.mean()))
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            converged = True
            break
        resp = np.exp(log_resp)
        weights, means, covs = _m_step(X, resp, reg)
        dead = np.flatnonzero(weights * n < 1e-8)
        for j in dead:
            n_reinit += 1
            logger.warning("GMM component %d collapsed; reinitialized at a random point", j)
            means[j] = X[rng.integers(n)]
            covs[j] = global_cov
            weights[j] = 1.0 / k
        if dead.size:
            weights = weights / weights.sum()
    return GmmFit(weights, means, covs, trace, converged, n_reinit)


class GaussianMixtureEM(BaseEstimator):
    """Estimator wrapper around :func:`gmm_fit`."""

    def __init__(self, n_components: int = 7, max_iter: int = 200, tol: float = 1e-8,
                 reg_covar: float = 1e-6, random_state: int = 0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.reg_covar = reg_covar
        self.random_state = random_state

    def fit(self, X, y=None):
        fit = gmm_fit(X, self.n_components, self.max_iter, self.tol, self.random_state, self.reg_covar)
        self.fit_ = fit
        self.weights_, self.means_, self.covariances_ = fit.weights, fit.means, fit.covariances
        self.log_likelihood_trace_ = fit.log_likelihood_trace
        self.converged_ = fit.converged
        return self

    def predict(self, X) -> NDArray[np.int64]:
        check_is_fitted(self, "fit_")
        return self.fit_.predict(check_array(X, dtype=np.float64))

    def predict_proba(self, X) -> NDArray:
        check_is_fitted(self, "fit_")
        return np.exp(self.fit_.log_resp(check_array(X, dtype=np.float64))[0])


# ----------------------------------------------------- hierarchical params


@dataclass(frozen=True, eq=False)
class EstimatedHierParams:
    mu_q: NDArray[np.float64]
    sigma_q: NDArray[np.float64]
    mu_star: NDArray[np.float64]
    sigma_0: NDArray[np.float64]
    sigma: float
    sigma_raw: float
    tasks: NDArray[np.int64]
    cluster: int
    cluster_sizes: NDArray[np.int64]
    sigma_q_raw_eigenvalues: NDArray[np.float64]

    def model_config(self) -> HierModelConfig:
        return HierModelConfig(self.mu_q, self.sigma_q, self.sigma_0, self.sigma)

    def to_dict(self) -> dict:
        return {
            "mu_q": self.mu_q.tolist(),
            "sigma_q": self.sigma_q.tolist(),
            "mu_star": self.mu_star.tolist(),
            "sigma_0": self.sigma_0.tolist(),
            "sigma": self.sigma,
            "sigma_raw": self.sigma_raw,
            "cluster": self.cluster,
            "cluster_sizes": self.cluster_sizes.tolist(),
            "tasks": self.tasks.tolist(),
            "sigma_q_raw_eigenvalues": self.sigma_q_raw_eigenvalues.tolist(),
        }


def estimate_hier_params(factorization: Factorization, gmm: GmmFit, ratings: RatingsMatrix) -> EstimatedHierParams:
    if gmm.k < 2:
        raise ConfigurationError("need k >= 2 mixture components to estimate the hyper-prior covariance")
    centers = gmm.means
    mu_q = centers.mean(axis=0)
    raw = symmetrize(np.cov(centers.T, bias=True).reshape(centers.shape[1], -1))
    sigma_q = raw + CENTER_JITTER * np.eye(raw.shape[0])
    labels = gmm.predict(factorization.U)
    sizes = np.bincount(labels, minlength=gmm.k)
    chosen = int(np.argmax(sizes))
    resid = ratings.ratings - factorization.predict(ratings.users, ratings.items)
    sigma_raw = float(math.sqrt(np.mean(resid**2)))
    return EstimatedHierParams(
        mu_q=mu_q,
        sigma_q=sigma_q,
        mu_star=centers[chosen].copy(),
        sigma_0=gmm.covariances[chosen].copy(),
        sigma=max(sigma_raw, SIGMA_FLOOR),
        sigma_raw=sigma_raw,
        tasks=np.flatnonzero(labels == chosen),
        cluster=chosen,
        cluster_sizes=sizes,
        sigma_q_raw_eigenvalues=np.linalg.eigvalsh(raw),
    )


def feature_scale(V: NDArray) -> float:
    """Largest c <= 1 with every row of c V inside the unit ball."""
    top = float(np.max(np.linalg.norm(V, axis=1)))
    return 1.0 / top if top > 1.0 else 1.0


def build_recsys_environment(
    params: EstimatedHierParams,
    factorization: Factorization,
    K: int = 10,
    m: int = 100,
    seed: int | np.random.Generator = 0,
) -> Environment:
    """Tasks are m users of the chosen cluster; actions are K distinct items.

    Item rows are shrunk by one global constant so all features have norm
    at most 1. User rows are left alone, so this rescales the rewards too.
    """
    pool = params.tasks
    if pool.size < m:
        raise ConfigurationError(f"chosen cluster has {pool.size} users, fewer than m={m}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    users = np.sort(rng.choice(pool, size=m, replace=False))
    c = feature_scale(factorization.V)
    return Environment(
        params.mu_star.copy(),
        factorization.U[users].copy(),
        params.sigma,
        ItemSlates(c * factorization.V, K, c),
        params.model_config(),
        {"source": "recsys", "users": users.tolist(), "feature_scale": c},
    )


def prepare(
    ratings: RatingsMatrix,
    rank: int = 10,
    k: int = 7,
    reg: float = 0.1,
    sweeps: int = 20,
    seed: int = 0,
) -> tuple[Factorization, GmmFit, EstimatedHierParams]:
    """ALS, then GMM on user factors, then hierarchical parameters; errors name the stage."""
    try:
        fact = als_factorize(ratings, rank, reg, sweeps, seed)
    except (ConfigurationError, np.linalg.LinAlgError) as exc:
        raise PipelineError(f"als: {exc}") from exc
    try:
        gmm = gmm_fit(fact.U, k, seed=seed)
    except (ConfigurationError, np.linalg.LinAlgError) as exc:
        raise PipelineError(f"gmm: {exc}") from exc
    try:
        params = estimate_hier_params(fact, gmm, ratings)
        params.model_config()
    except (ConfigurationError, np.linalg.LinAlgError) as exc:
        raise PipelineError(f"estimate: {exc}") from exc
    return fact, gmm, params
