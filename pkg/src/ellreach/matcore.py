"""Dense small-matrix kernels.

Everything here works on plain ``numpy`` arrays and returns fresh arrays;
inputs are never modified. The symmetric eigensolver is a cyclic Jacobi
method with threshold sweeps, which is simple, dimension free and very
accurate at the sizes this package deals with (n <= 64).
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatch, NoConvergence, NotPsd, NotSymmetric

SYM_TOL = 1e-12
PSD_CLAMP = 1e-12
MAX_SWEEPS = 100
MAX_DIM = 64


class EigenDecomposition(NamedTuple):
    """Eigenvalues in ascending order and matching orthonormal eigenvectors (columns)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        V = self.eigenvectors
        return (V * self.eigenvalues) @ V.T


def as_square(S, name="matrix") -> np.ndarray:
    """Return ``S`` as a float square array, checking shape and finiteness."""
    a = np.array(S, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise DimensionMismatch(f"{name} must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def check_symmetric(a: np.ndarray, tol: float = SYM_TOL) -> None:
    scale = max(1.0, float(np.max(np.abs(a))))
    if float(np.max(np.abs(a - a.T))) > tol * scale:
        raise NotSymmetric(f"asymmetry {np.max(np.abs(a - a.T)):.3e} exceeds tolerance")


def _jacobi_2x2(a00, a01, a11):
    # A single Jacobi rotation diagonalises a 2x2 symmetric matrix exactly.
    if a01 == 0.0:
        c, s = 1.0, 0.0
        d0, d1 = a00, a11
    else:
        theta = (a11 - a00) / (2.0 * a01)
        t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
        c = 1.0 / math.sqrt(t * t + 1.0)
        s = t * c
        d0 = a00 - t * a01
        d1 = a11 + t * a01
    # columns of V are (c, -s) and (s, c)
    if d0 <= d1:
        return np.array([d0, d1]), np.array([[c, s], [-s, c]])
    return np.array([d1, d0]), np.array([[s, c], [c, -s]])


def sym_eigen(S) -> EigenDecomposition:
    """Symmetric eigendecomposition by cyclic Jacobi sweeps.

    Args:
        S: symmetric square matrix (asymmetry up to 1e-12 relative is
            tolerated and averaged away).

    Returns:
        EigenDecomposition with ascending eigenvalues.

    Raises:
        NotSymmetric: if the input is not symmetric.
        NoConvergence: if more than 100 sweeps are needed.
    """
    a = as_square(S)
    check_symmetric(a)
    n = a.shape[0]
    if n > MAX_DIM:
        raise DimensionMismatch(f"dimension {n} exceeds the supported maximum {MAX_DIM}")
    if n == 1:
        return EigenDecomposition(a[0].copy(), np.ones((1, 1)))
    if n == 2:
        lam, V = _jacobi_2x2(a[0, 0], 0.5 * (a[0, 1] + a[1, 0]), a[1, 1])
        return EigenDecomposition(lam, V)

    a = 0.5 * (a + a.T)
    V = np.eye(n)
    iu = np.triu_indices(n, 1)
    for sweep in range(MAX_SWEEPS + 1):
        off = float(np.sqrt(np.sum(a[iu] ** 2)))
        scale = float(np.sqrt(np.sum(np.diag(a) ** 2))) + off
        if off <= 1e-300 or off <= 1e-17 * scale:
            break
        if sweep == MAX_SWEEPS:
            raise NoConvergence(f"Jacobi did not converge in {MAX_SWEEPS} sweeps")
        # threshold strategy: skip tiny elements in the first sweeps
        thresh = 0.2 * off / (n * n) if sweep < 3 else 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= thresh:
                    continue
                app, aqq = a[p, p], a[q, q]
                if sweep > 3 and abs(apq) * 1e18 <= min(abs(app), abs(aqq)):
                    a[p, q] = a[q, p] = 0.0
                    continue
                if apq == 0.0:
                    continue
                theta = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                colp = a[:, p].copy()
                colq = a[:, q].copy()
                a[:, p] = c * colp - s * colq
                a[:, q] = s * colp + c * colq
                rowp = a[p, :].copy()
                rowq = a[q, :].copy()
                a[p, :] = c * rowp - s * rowq
                a[q, :] = s * rowp + c * rowq
                a[p, q] = a[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    lam = np.diag(a).copy()
    order = np.argsort(lam, kind="stable")
    return EigenDecomposition(lam[order], V[:, order])


def min_eigenvalue(S) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    return float(sym_eigen(S).eigenvalues[0])


def _checked_eigenvalues(lam: np.ndarray, semidefinite_ok: bool) -> np.ndarray:
    if lam[0] < -PSD_CLAMP:
        raise NotPsd(f"eigenvalue {lam[0]:.3e} is negative")
    if lam[0] < 0.0:
        if not semidefinite_ok:
            raise NotPsd(f"eigenvalue {lam[0]:.3e} is negative")
        lam = np.maximum(lam, 0.0)
    return lam


def spd_sqrt(Q, semidefinite_ok: bool = False) -> np.ndarray:
    """Symmetric square root of a positive (semi-)definite matrix.

    Eigenvalues in [-1e-12, 0) are clamped to zero when ``semidefinite_ok``
    is set; anything more negative raises NotPsd.
    """
    dec = sym_eigen(Q)
    lam = _checked_eigenvalues(dec.eigenvalues, semidefinite_ok)
    V = dec.eigenvectors
    R = (V * np.sqrt(lam)) @ V.T
    return 0.5 * (R + R.T)


def spd_roots(Q):
    """Return ``(Q^{1/2}, Q^{-1/2}, min eigenvalue)`` from one decomposition.

    Raises:
        NotPsd: if Q is not strictly positive definite.
    """
    dec = sym_eigen(Q)
    lam = dec.eigenvalues
    if not lam[0] > 0.0:
        raise NotPsd(f"smallest eigenvalue {lam[0]:.3e} is not positive")
    V = dec.eigenvectors
    r = np.sqrt(lam)
    Qh = (V * r) @ V.T
    Qmh = (V / r) @ V.T
    return 0.5 * (Qh + Qh.T), 0.5 * (Qmh + Qmh.T), float(lam[0])


def spd_inverse(Q) -> np.ndarray:
    """Inverse of a strictly positive definite matrix through its eigenpairs."""
    dec = sym_eigen(Q)
    if not dec.eigenvalues[0] > 0.0:
        raise NotPsd("matrix is not positive definite")
    V = dec.eigenvectors
    R = (V / dec.eigenvalues) @ V.T
    return 0.5 * (R + R.T)


def as_spd(Q, semidefinite: bool = False, name="matrix") -> np.ndarray:
    """Validate and return a read-only symmetric positive (semi-)definite matrix."""
    a = as_square(Q, name)
    check_symmetric(a)
    a = 0.5 * (a + a.T)
    lam = sym_eigen(a).eigenvalues[0]
    if semidefinite:
        if lam < -PSD_CLAMP:
            raise NotPsd(f"{name} has eigenvalue {lam:.3e} < 0")
    elif not lam > 0.0:
        raise NotPsd(f"{name} is not positive definite (min eigenvalue {lam:.3e})")
    a.setflags(write=False)
    return a


def is_orthogonal(S, tol: float = 1e-9) -> bool:
    """True iff ``||S^T S - I||_F <= tol``."""
    a = np.atleast_2d(np.asarray(S, dtype=float))
    if a.shape[0] != a.shape[1]:
        return False
    return bool(np.linalg.norm(a.T @ a - np.eye(a.shape[0])) <= tol)
