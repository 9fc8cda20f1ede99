"""Suboptimality bounds for the pessimistic learners and checks of their assumptions.

All bounds share the pessimism multiplier alpha = sqrt(5 d ln(1/delta)) and
a coverage constant gamma with G_s >= gamma sigma^-2 n_s G_{s,*} in the PSD
order, where G_{s,*} is the second moment of the optimal action's features.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import eigh

from ._validation import NORM_TOL, ConfigurationError
from .data import HierModelConfig, LoggedDataset
from .envsim import (
    ENV_STREAM,
    EVAL_STREAM,
    LOG_STREAM,
    Environment,
    SyntheticEnvConfig,
    evaluate_on_slates,
    generate_log,
    make_rng,
    sample_environment,
)
from .policy import fit_hieropo
from .posterior import TaskStatistics, compute_task_statistics

RANGE_TOL = 1e-10
# random stream purpose id for G_{s,*} estimation, next to those in envsim
GSTAR_STREAM = 3


def alpha_schedule(d: int, delta: float) -> float:
    if d < 1:
        raise ConfigurationError(f"d must be >= 1, got {d}")
    if not 0 < delta < 1:
        raise ConfigurationError(f"delta must lie in (0, 1), got {delta}")
    return math.sqrt(5 * d * math.log(1 / delta))


@dataclass(frozen=True)
class BoundInputs:
    """Scalar summaries the bounds depend on.

    ``lambda_max_inv_gstar`` holds lambda_1(G_{z,*}^-1) per task and is only
    needed by the general multi-task variant; use ``inf`` for singular G_{z,*}.
    """

    delta: float
    d: int
    gamma: float
    sigma: float
    lambda_min_prec_0: float
    lambda_min_prec_q: float
    lambda_max_cov_0: float
    task_counts: tuple[int, ...] = ()
    lambda_max_inv_gstar: tuple[float, ...] | None = None
    lambda_min_prec_flat: float | None = None

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        if self.sigma <= 0:
            raise ConfigurationError(f"sigma must be > 0, got {self.sigma}")
        for name in ("lambda_min_prec_0", "lambda_min_prec_q", "lambda_max_cov_0"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        object.__setattr__(self, "task_counts", tuple(int(n) for n in self.task_counts))
        if self.lambda_max_inv_gstar is not None:
            vals = tuple(float(v) for v in self.lambda_max_inv_gstar)
            if len(vals) != len(self.task_counts):
                raise ConfigurationError("need one lambda_1(G_*^-1) per task")
            object.__setattr__(self, "lambda_max_inv_gstar", vals)

    @classmethod
    def from_model(
        cls,
        config: HierModelConfig,
        delta: float,
        gamma: float,
        task_counts: Sequence[int] = (),
        gstars: Sequence[NDArray] | None = None,
    ) -> "BoundInputs":
        lam_inv = None
        if gstars is not None:
            lam_inv = []
            for g in gstars:
                lo = float(np.linalg.eigvalsh(g)[0])
                lam_inv.append(math.inf if lo <= RANGE_TOL else 1.0 / lo)
        return cls(
            delta=delta,
            d=config.d,
            gamma=gamma,
            sigma=config.sigma,
            lambda_min_prec_0=float(np.linalg.eigvalsh(config.prec_0)[0]),
            lambda_min_prec_q=float(np.linalg.eigvalsh(config.prec_q)[0]),
            lambda_max_cov_0=float(np.linalg.eigvalsh(config.sigma_0)[-1]),
            task_counts=tuple(task_counts),
            lambda_max_inv_gstar=None if lam_inv is None else tuple(lam_inv),
            lambda_min_prec_flat=float(1.0 / np.linalg.eigvalsh(config.sigma_q + config.sigma_0)[-1]),
        )


@dataclass(frozen=True)
class BoundReport:
    alpha: float
    epsilon_task: float
    epsilon_hyper: float
    variant: str
    gamma_used: float
    diagnostic: str = ""
    inputs: dict = field(default_factory=dict)

    @property
    def epsilon_total(self) -> float:
        return self.epsilon_task + self.epsilon_hyper

    def to_dict(self) -> dict:
        out = asdict(self)
        out["epsilon_total"] = self.epsilon_total
        return out


def _width(alpha: float, d: int, denom: float) -> float:
    return alpha * math.sqrt(4 * d / denom)


def _task_term(inputs: BoundInputs, n: int, lambda_min_prec: float) -> float:
    alpha = alpha_schedule(inputs.d, inputs.delta)
    return _width(alpha, inputs.d, lambda_min_prec + inputs.gamma * inputs.sigma**-2 * n)


def single_task_bound(inputs: BoundInputs, n: int) -> BoundReport:
    eps = _task_term(inputs, n, inputs.lambda_min_prec_0)
    return BoundReport(alpha_schedule(inputs.d, inputs.delta), eps, 0.0, "single", inputs.gamma,
                       inputs=asdict(inputs))


def _hyper_summand(inputs: BoundInputs, n_z: int, lam_inv_gstar: float) -> float:
    # 1 / (lambda_1(Sigma_0) + sigma^2 lambda_1(G_*^-1) / (gamma n_z)); zero when that is infinite
    if n_z == 0 or inputs.gamma == 0 or math.isinf(lam_inv_gstar):
        return 0.0
    return 1.0 / (inputs.lambda_max_cov_0 + inputs.sigma**2 * lam_inv_gstar / (inputs.gamma * n_z))


def multi_task_bound(
    inputs: BoundInputs, task_id: int, variant: str = "general", sparse_diagonal: bool = False
) -> BoundReport:
    """Task term plus hyper-parameter term for one task.

    ``variant="diagonal"`` is the sharper form valid for one-sparse features
    and diagonal covariances; it drops lambda_1(G_{z,*}^-1) from the summands.
    The caller vouches for that structure with ``sparse_diagonal=True``
    (normally ``check_assumptions(...).sparse_diagonal``).
    """
    if variant not in ("general", "diagonal"):
        raise ConfigurationError(f"variant must be 'general' or 'diagonal', got {variant!r}")
    if variant == "diagonal" and not sparse_diagonal:
        raise ConfigurationError("diagonal variant needs one-sparse features and diagonal covariances")
    if not 0 <= task_id < len(inputs.task_counts):
        raise ConfigurationError(f"task_id {task_id} outside [0, {len(inputs.task_counts)})")
    if variant == "general":
        if inputs.lambda_max_inv_gstar is None:
            raise ConfigurationError("general variant needs lambda_1(G_{z,*}^-1) for every task")
        lam = inputs.lambda_max_inv_gstar
    else:
        lam = (1.0,) * len(inputs.task_counts)
    alpha = alpha_schedule(inputs.d, inputs.delta)
    eps_task = _task_term(inputs, inputs.task_counts[task_id], inputs.lambda_min_prec_0)
    diag = ""
    singular = any(math.isinf(v) for v, n in zip(lam, inputs.task_counts) if n > 0)
    if variant == "general" and singular and inputs.gamma > 0:
        eps_hyper = math.inf
        diag = "G_{z,*} singular for some task: general hyper-parameter term is vacuous"
    else:
        denom = inputs.lambda_min_prec_q + sum(
            _hyper_summand(inputs, n, v) for n, v in zip(inputs.task_counts, lam)
        )
        eps_hyper = _width(alpha, inputs.d, denom)
    return BoundReport(alpha, eps_task, eps_hyper, variant, inputs.gamma, diag, asdict(inputs))


def flatopo_bound(inputs: BoundInputs, n_s: int) -> float:
    if inputs.lambda_min_prec_flat is None:
        raise ConfigurationError("flat bound needs lambda_d((Sigma_q + Sigma_0)^-1)")
    return _task_term(inputs, n_s, inputs.lambda_min_prec_flat)


# --------------------------------------------------------------- gamma


def estimate_optimal_second_moment(
    env: Environment, task_id: int, n_eval: int, rng: np.random.Generator
) -> tuple[NDArray, NDArray]:
    """Monte Carlo G_{s,*} = E[phi(X, a*) phi(X, a*)^T] and the standard error of each entry."""
    slates = env.sampler.sample(rng, n_eval)
    best = np.argmax(slates @ env.thetas[task_id], axis=1)
    phi = slates[np.arange(n_eval), best]
    outer = np.einsum("ni,nj->nij", phi, phi)
    g = outer.mean(axis=0)
    se = outer.std(axis=0, ddof=1) / math.sqrt(n_eval) if n_eval > 1 else np.zeros_like(g)
    return 0.5 * (g + g.T), se


def coverage_ratio(g_s: NDArray, n_s: int, sigma: float, g_star: NDArray) -> float:
    """Largest gamma with g_s - gamma sigma^-2 n_s g_star PSD, restricted to range(g_star)."""
    lam, vec = np.linalg.eigh(g_star)
    keep = lam > RANGE_TOL * max(1.0, float(lam[-1]))
    if not np.any(keep):
        return math.inf
    if n_s == 0:
        return 0.0
    U = vec[:, keep]
    b = sigma**-2 * n_s * (U.T @ g_star @ U)
    a = U.T @ g_s @ U
    gen = eigh(0.5 * (a + a.T), 0.5 * (b + b.T), eigvals_only=True)
    return max(0.0, float(gen[0]))


def estimate_gamma(
    stats: Sequence[TaskStatistics],
    env: Environment,
    sigma: float,
    n_eval: int = 10_000,
    seed: int = 0,
    gstars: Sequence[NDArray] | None = None,
) -> tuple[float, list[float], list[NDArray]]:
    """Overall gamma (min over tasks), per-task gammas, and the G_{s,*} estimates used."""
    if gstars is None:
        gstars = [estimate_optimal_second_moment(env, s, n_eval, make_rng(seed, GSTAR_STREAM, s))[0] for s in range(env.m)]
    per_task = [coverage_ratio(st.g, st.n_s, sigma, gs) for st, gs in zip(stats, gstars)]
    finite = [g for g in per_task if math.isfinite(g)]
    return (min(finite) if finite else 0.0), per_task, list(gstars)


# ----------------------------------------------------------- assumptions


@dataclass
class AssumptionReport:
    max_feature_norm: float
    bounded_features: bool
    offending_records: list[int]
    gamma: float | None = None
    gamma_per_task: list[float] | None = None
    one_sparse_features: bool = False
    diagonal_covariances: bool = False

    @property
    def sparse_diagonal(self) -> bool:
        return self.one_sparse_features and self.diagonal_covariances

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sparse_diagonal"] = self.sparse_diagonal
        return out


def _is_diagonal(a: NDArray, tol: float = 1e-12) -> bool:
    return bool(np.all(np.abs(a - np.diag(np.diag(a))) <= tol))


def check_assumptions(
    dataset: LoggedDataset,
    config: HierModelConfig,
    env: Environment | None = None,
    n_eval: int = 10_000,
    seed: int = 0,
) -> AssumptionReport:
    norms = np.linalg.norm(dataset.features, axis=1) if len(dataset) else np.zeros(0)
    bad = np.flatnonzero(norms > 1 + NORM_TOL).tolist()
    report = AssumptionReport(
        max_feature_norm=float(norms.max()) if norms.size else 0.0,
        bounded_features=not bad,
        offending_records=bad,
        one_sparse_features=bool(np.all(np.count_nonzero(dataset.features, axis=1) <= 1)),
        diagonal_covariances=_is_diagonal(config.sigma_q) and _is_diagonal(config.sigma_0),
    )
    if env is not None:
        stats = compute_task_statistics(dataset, config)
        gamma, per_task, _ = estimate_gamma(stats, env, config.sigma, n_eval, seed)
        report.gamma = gamma
        report.gamma_per_task = per_task
    return report


# ------------------------------------------------------------- coverage


@dataclass(frozen=True)
class CoverageRecord:
    run_id: int
    task_id: int
    n_s: int
    gamma: float
    suboptimality: float
    epsilon_task: float
    epsilon_hyper: float

    @property
    def covered(self) -> bool:
        return self.suboptimality <= self.epsilon_task + self.epsilon_hyper


def coverage_run(config: SyntheticEnvConfig, run_id: int, delta: float = 0.1) -> list[CoverageRecord]:
    """One synthetic run of HierOPO at the theory alpha, each task checked against its bound."""
    env = sample_environment(config, make_rng(config.seed, run_id, ENV_STREAM))
    log = generate_log(env, config.n, make_rng(config.seed, run_id, LOG_STREAM))
    model = env.model
    policy = fit_hieropo(log, model, alpha_schedule(config.d, delta))
    stats = compute_task_statistics(log, model)
    gstars = [
        estimate_optimal_second_moment(env, s, config.n_eval, make_rng(config.seed, run_id, GSTAR_STREAM, s))[0]
        for s in range(env.m)
    ]
    gamma, _, _ = estimate_gamma(stats, env, model.sigma, gstars=gstars)
    inputs = BoundInputs.from_model(model, delta, gamma, [s.n_s for s in stats], gstars)
    out = []
    for s in range(env.m):
        slates = env.sampler.sample(make_rng(config.seed, run_id, EVAL_STREAM, s), config.n_eval)
        sub = evaluate_on_slates(env, policy, s, slates).suboptimality
        rep = multi_task_bound(inputs, s)
        out.append(CoverageRecord(run_id, s, stats[s].n_s, gamma, sub, rep.epsilon_task, rep.epsilon_hyper))
    return out
