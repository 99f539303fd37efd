"""Positive-definite matrices kept together with their Cholesky factor.

Only the matrix itself is stored; anything involving its inverse goes through
triangular solves against the factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalError

PIVOT_FLOOR = 1e-12


def _factor(matrix: np.ndarray) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"matrix is not positive definite: {exc}") from exc
    pivots = np.diag(chol)
    if pivots.min() < PIVOT_FLOOR:
        raise NumericalError(
            f"Cholesky pivot {pivots.min():.3e} below {PIVOT_FLOOR:g}; refusing to regularise"
        )
    return chol


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PsdMatrix:
    """Symmetric positive-definite matrix ``A = L L^T`` with cached factor ``L``."""

    matrix: np.ndarray
    chol: np.ndarray

    @classmethod
    def from_matrix(cls, matrix) -> "PsdMatrix":
        A = np.array(matrix, dtype=float, copy=True)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        scale = max(float(np.max(np.abs(A))), 1.0)
        if np.max(np.abs(A - A.T)) > 1e-10 * scale:
            raise ValueError("matrix must be symmetric")
        A = 0.5 * (A + A.T)
        return cls(_readonly(A), _readonly(_factor(A)))

    @classmethod
    def scaled_identity(cls, dim: int, scale: float = 1.0) -> "PsdMatrix":
        if dim < 1:
            raise ValueError("dimension must be at least 1")
        if not scale > 0:
            raise ValueError("scale must be positive")
        return cls.from_matrix(scale * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim or x.ndim > 2:
            raise ValueError(f"expected vectors of length {self.dim}, got shape {x.shape}")
        return x

    def whiten(self, x) -> np.ndarray:
        """``L^{-1} x`` (rows of a 2-d input are whitened independently)."""
        x = self._check(x)
        return solve_triangular(self.chol, x.T, lower=True, check_finite=False).T


def rank_one_update(M: PsdMatrix, x) -> PsdMatrix:
    """Return ``M + x x^T``, refactorised from scratch."""
    x = np.asarray(x, dtype=float)
    if x.shape != (M.dim,):
        raise ValueError(f"update vector must have shape ({M.dim},), got {x.shape}")
    A = M.matrix + np.outer(x, x)
    return PsdMatrix(_readonly(A), _readonly(_factor(A)))


def mahalanobis(x, M: PsdMatrix, mode: str = "inverse"):
    """``sqrt(x^T M x)`` (``mode="direct"``) or ``sqrt(x^T M^{-1} x)`` (``mode="inverse"``).

    A 2-d ``x`` is treated as a stack of row vectors.
    """
    x = M._check(x)
    if mode == "direct":
        y = x @ M.chol
    elif mode == "inverse":
        y = M.whiten(x)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    out = np.linalg.norm(y, axis=-1)
    return float(out) if out.ndim == 0 else out


def ridge_solve(M: PsdMatrix, b) -> np.ndarray:
    """``M^{-1} b`` via two triangular solves."""
    b = np.asarray(b, dtype=float)
    if b.shape != (M.dim,):
        raise ValueError(f"right-hand side must have shape ({M.dim},), got {b.shape}")
    y = solve_triangular(M.chol, b, lower=True, check_finite=False)
    return solve_triangular(M.chol, y, lower=True, trans="T", check_finite=False)


def sample_correlated_gaussian(mean, scale: float, M: PsdMatrix, rng) -> np.ndarray:
    """Draw from ``N(mean, scale * M^{-1})``.

    ``z`` solves ``L^T z = u`` with ``u`` standard normal, so ``cov(z) = M^{-1}``.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (M.dim,):
        raise ValueError(f"mean must have shape ({M.dim},)")
    u = rng.standard_normal(M.dim)
    z = solve_triangular(M.chol, u, lower=True, trans="T", check_finite=False)
    return mean + np.sqrt(scale) * z
