"""Functions of symmetric matrices computed through the eigendecomposition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, NumericError


@dataclass(frozen=True)
class EigenDecomp:
    values: np.ndarray   # ascending
    vectors: np.ndarray  # orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def symmetrize(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.swapaxes(-1, -2))


def eigh_sym(m) -> EigenDecomp:
    m = symmetrize(m)
    if m.shape[-1] != m.shape[-2]:
        raise DimensionError(f"expected square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix has non-finite entries")
    try:
        w, v = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    return EigenDecomp(w, v)


def _apply(d: EigenDecomp, values: np.ndarray) -> np.ndarray:
    out = (d.vectors * values[..., None, :]) @ d.vectors.swapaxes(-1, -2)
    return symmetrize(out)


def matrix_log(m, eig_floor: float = 1e-10) -> np.ndarray:
    """Matrix logarithm of a symmetric positive semi-definite matrix.

    Eigenvalues below ``eig_floor * mean(eigenvalues)`` are raised to that
    level before taking logs, so near-singular inputs stay finite. Works on a
    single matrix or a stack ``(..., N, N)``.

    Raises
    ------
    DomainError
        If an eigenvalue is below ``-1e-8 * trace / N`` (clearly indefinite)
        or the matrix has no positive mass at all.
    """
    d = eigh_sym(m)
    lam = d.values
    mean = lam.mean(axis=-1, keepdims=True)
    if np.any(mean <= 0):
        raise DomainError("matrix_log needs a positive trace")
    if np.any(lam[..., :1] < -1e-8 * mean):
        raise DomainError(f"matrix_log input is indefinite (min eigenvalue {lam[..., 0].min():.3e})")
    return _apply(d, np.log(np.maximum(lam, eig_floor * mean)))


def matrix_exp(m) -> np.ndarray:
    """Matrix exponential of a symmetric matrix (result is SPD)."""
    d = eigh_sym(m)
    return _apply(d, np.exp(d.values))


def psd_project(m, floor: float = 0.0) -> np.ndarray:
    """Clip eigenvalues from below at ``floor``.

    Matrices whose smallest eigenvalue already reaches ``floor`` are returned
    unchanged (symmetrized copy), not reassembled from their decomposition.
    """
    m = symmetrize(m)
    if m.ndim != 2:
        return np.stack([psd_project(x, floor) for x in m])
    d = eigh_sym(m)
    if d.values[0] >= floor:
        return m
    return _apply(d, np.maximum(d.values, floor))


def is_spd(m) -> bool:
    try:
        np.linalg.cholesky(symmetrize(m))
    except np.linalg.LinAlgError:
        return False
    return True
