# src/coverage_model/core/linalg.py
"""
Linear algebra for Gaussian full conditionals.

The AR(1) structure matrix is tridiagonal, so every time-series block is
sampled with a batched tridiagonal Cholesky factorization that runs over all
rows at once. Static effects form one small dense system sampled with scipy's
Cholesky routines.
"""
import logging
from typing import Tuple

import numpy as np
from scipy import linalg as sla

from .errors import ModelDomainError

logger = logging.getLogger(__name__)


def _check_rho(rho: float) -> None:
    if not np.isfinite(rho) or abs(rho) >= 1.0:
        raise ModelDomainError(f"autocorrelation must satisfy |rho| < 1, got {rho}")


def ar1_bands(T: int, rho: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns the (diagonal, off-diagonal) bands of the AR(1) structure matrix.

    Raises:
        ModelDomainError: If T < 1 or |rho| >= 1.
    """
    if T < 1:
        raise ModelDomainError(f"time dimension must be >= 1, got {T}")
    _check_rho(rho)
    if T == 1:
        return np.array([1.0 - rho * rho]), np.zeros(0)
    diag = np.full(T, 1.0 + rho * rho)
    diag[0] = diag[-1] = 1.0
    off = np.full(T - 1, -rho)
    return diag, off


def ar1_structure(T: int, rho: float) -> np.ndarray:
    """
    Dense T x T precision structure of a stationary AR(1) process with unit
    innovation variance. Dividing by sigma^2 gives the precision matrix.

    Args:
        T: Series length, at least 1.
        rho: Autocorrelation strictly inside (-1, 1).

    Returns:
        Symmetric tridiagonal matrix; [1 - rho^2] when T == 1.

    Raises:
        ModelDomainError: If T < 1 or |rho| >= 1.
    """
    diag, off = ar1_bands(T, rho)
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


def ar1_logdet(T: int, rho: float) -> float:
    """log |R| for the AR(1) structure matrix; equal to log(1 - rho^2) for every T."""
    _check_rho(rho)
    return float(np.log1p(-rho * rho))


def ar1_quadratic(rows: np.ndarray, rho: float) -> np.ndarray:
    """Computes x' R x for every row x of a (n, T) array."""
    rows = np.atleast_2d(rows)
    if rows.shape[1] == 1:
        return (1.0 - rho * rho) * rows[:, 0] ** 2
    total = np.sum(rows * rows, axis=1)
    inner = np.sum(rows[:, 1:-1] ** 2, axis=1)
    cross = np.sum(rows[:, :-1] * rows[:, 1:], axis=1)
    return total + rho * rho * inner - 2.0 * rho * cross


def tridiagonal_cholesky(diag: np.ndarray, off: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Batched Cholesky factor of symmetric tridiagonal matrices.

    Args:
        diag: (n, T) diagonals.
        off: (n, T-1) first super-diagonals.

    Returns:
        (ld, lo): diagonal and sub-diagonal of the lower factors, shaped like the inputs.

    Raises:
        np.linalg.LinAlgError: If any matrix is not positive definite.
    """
    n, T = diag.shape
    ld = np.empty((n, T))
    lo = np.empty((n, max(T - 1, 0)))
    prev = np.zeros(n)
    for t in range(T):
        pivot = diag[:, t] - prev * prev
        if np.any(pivot <= 0.0):
            raise np.linalg.LinAlgError("tridiagonal matrix is not positive definite")
        ld[:, t] = np.sqrt(pivot)
        if t < T - 1:
            lo[:, t] = off[:, t] / ld[:, t]
            prev = lo[:, t]
    return ld, lo


def _forward(ld: np.ndarray, lo: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty_like(b)
    out[:, 0] = b[:, 0] / ld[:, 0]
    for t in range(1, b.shape[1]):
        out[:, t] = (b[:, t] - lo[:, t - 1] * out[:, t - 1]) / ld[:, t]
    return out


def _backward(ld: np.ndarray, lo: np.ndarray, v: np.ndarray) -> np.ndarray:
    T = v.shape[1]
    out = np.empty_like(v)
    out[:, T - 1] = v[:, T - 1] / ld[:, T - 1]
    for t in range(T - 2, -1, -1):
        out[:, t] = (v[:, t] - lo[:, t] * out[:, t + 1]) / ld[:, t]
    return out


def tridiagonal_solve(diag: np.ndarray, off: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solves Q x = b row by row for a batch of tridiagonal precisions."""
    ld, lo = tridiagonal_cholesky(diag, off)
    return _backward(ld, lo, _forward(ld, lo, b))


def sample_tridiagonal(diag: np.ndarray, off: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Draws x ~ N(Q^{-1} b, Q^{-1}) independently for every row of a batch of
    tridiagonal precisions Q.
    """
    ld, lo = tridiagonal_cholesky(diag, off)
    v = _forward(ld, lo, b)
    z = rng.standard_normal(b.shape)
    return _backward(ld, lo, v + z)


def sample_gaussian(precision: np.ndarray, linear: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Draws x ~ N(Q^{-1} b, Q^{-1}) for a dense precision Q and linear term b.

    Raises:
        np.linalg.LinAlgError: If Q is not positive definite.
    """
    chol = sla.cholesky(precision, lower=True, check_finite=False)
    mean = sla.cho_solve((chol, True), linear, check_finite=False)
    z = rng.standard_normal(linear.shape[0])
    return mean + sla.solve_triangular(chol, z, lower=True, trans="T", check_finite=False)


def gaussian_moments(precision: np.ndarray, linear: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the Gaussian with precision Q and linear term b."""
    factor = sla.cho_factor(precision, lower=True)
    mean = sla.cho_solve(factor, linear)
    cov = sla.cho_solve(factor, np.eye(precision.shape[0]))
    return mean, cov
