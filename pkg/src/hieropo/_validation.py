"""Input validation helpers shared by the estimators and the numeric routines."""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import cho_factor, cho_solve

SPD_TOL = 1e-10
NORM_TOL = 1e-9


class ConfigurationError(ValueError):
    """Raised when model parameters or data dimensions are inconsistent."""


def symmetrize(a: NDArray) -> NDArray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def check_vector(x: ArrayLike, d: int, name: str) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 and d == 1:
        x = x.reshape(1)
    if x.shape != (d,):
        raise ConfigurationError(f"{name} must have shape ({d},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ConfigurationError(f"{name} contains non-finite values")
    return x


def check_spd(a: ArrayLike, d: int, name: str, tol: float = SPD_TOL) -> NDArray[np.float64]:
    """Return ``a`` as a float (d, d) array after checking symmetry and positive definiteness."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0 and d == 1:
        a = a.reshape(1, 1)
    if a.shape != (d, d):
        raise ConfigurationError(f"{name} must have shape ({d}, {d}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigurationError(f"{name} contains non-finite values")
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - a.T)) > tol * scale:
        raise ConfigurationError(f"{name} is not symmetric")
    lam_min = float(np.linalg.eigvalsh(a)[0])
    if lam_min <= tol:
        raise ConfigurationError(
            f"{name} is not positive definite (smallest eigenvalue {lam_min:.3e})"
        )
    return symmetrize(a)


def spd_inverse(a: NDArray) -> NDArray:
    """Inverse of an SPD matrix via Cholesky; only for the few places a product needs it."""
    c = cho_factor(a, lower=True)
    return symmetrize(cho_solve(c, np.eye(a.shape[0])))


def check_features(X: ArrayLike, d: int | None = None, name: str = "features") -> NDArray[np.float64]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1) if d is None or X.shape[0] == d else X.reshape(-1, 1)
    if X.ndim != 2:
        raise ConfigurationError(f"{name} must be 2-D, got shape {X.shape}")
    if d is not None and X.shape[1] != d:
        raise ConfigurationError(f"{name} have dimension {X.shape[1]}, expected d={d}")
    if not np.all(np.isfinite(X)):
        raise ConfigurationError(f"{name} contain non-finite values")
    return X


def check_slates(slates: ArrayLike, d: int) -> NDArray[np.float64]:
    """Validate one slate (K, d) or a batch of slates (N, K, d); returns a 3-D array."""
    s = np.asarray(slates, dtype=np.float64)
    if s.ndim == 2:
        s = s[None]
    if s.ndim != 3:
        raise ConfigurationError(f"slates must have shape (K, d) or (N, K, d), got {s.shape}")
    if s.shape[1] == 0:
        raise ConfigurationError("slate has no actions")
    if s.shape[2] != d:
        raise ConfigurationError(f"slate dimension {s.shape[2]} does not match d={d}")
    return s


def max_row_norm(X: NDArray) -> float:
    if X.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(X, axis=-1)))
