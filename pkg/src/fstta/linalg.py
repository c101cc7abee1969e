"""Small dense linear algebra for gradient and parameter scatter analysis.

Both adaptation phases decompose the scatter of a handful of centered rows
living in a high-dimensional space. The scatter matrix ``X^T X / denom`` is
never formed; instead the ``R x R`` Gram matrix ``X X^T / denom`` is
diagonalised with cyclic Jacobi rotations and its eigenvectors are mapped
back to column space.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataValidityError, NumericalError

DEFAULT_EIG_TOL = 1e-12
TRACE_FLOOR = 1e-300
MAX_SWEEPS = 64


def as_vec(x, name="vector"):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DataValidityError(f"{name} must be a non-empty 1-D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DataValidityError(f"{name} has non-finite entries")
    return v


def as_rows(x, name="matrix"):
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DataValidityError(f"{name} must be a 2-D array with R, C >= 1, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DataValidityError(f"{name} has non-finite entries")
    return m


@dataclass(frozen=True)
class EigenSystem:
    """Retained eigenpairs of a symmetric positive semi-definite matrix.

    ``eigenvectors`` holds one unit vector per row, matching ``eigenvalues``
    in descending order. ``trace`` is the trace of the full matrix, which
    may exceed ``eigenvalues.sum()`` when pairs below tolerance were dropped.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    trace: float

    @property
    def rank(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def dim(self) -> int:
        return int(self.eigenvectors.shape[1])


def center_rows(x):
    """Return ``(mean, centered)`` where ``centered = x - mean`` row-wise."""
    x = as_rows(x)
    if np.all(x == x[0]):
        # exact for repeated rows, where summation rounding would leak
        return x[0].copy(), np.zeros_like(x)
    mean = x.mean(axis=0)
    return mean, x - mean


def _off_norm(a):
    return float(np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2)))


def _jacobi(a, max_sweeps=MAX_SWEEPS):
    # Cyclic Jacobi (Golub & Van Loan 8.5.3). Returns (eigenvalues, V) with
    # a = V diag(w) V^T, columns of V the eigenvectors, unsorted.
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    target = 1e-15 * scale
    for _ in range(max_sweeps):
        off = _off_norm(a)
        if off <= target:
            return a.diagonal().copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # a <- J^T a J with J the (p, q) Givens rotation
                ap = a[:, p].copy()
                aq = a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :]
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    off = _off_norm(a)
    if off <= target:
        return a.diagonal().copy(), v
    raise NumericalError(
        f"Jacobi eigensolver did not converge in {max_sweeps} sweeps "
        f"(off-diagonal norm {off:.3e}, target {target:.3e})"
    )


def _canonical_sign(vecs):
    # Make the largest-magnitude coordinate of each row positive so that
    # outputs are reproducible across code paths.
    idx = np.argmax(np.abs(vecs), axis=1)
    signs = np.sign(vecs[np.arange(vecs.shape[0]), idx])
    signs[signs == 0] = 1.0
    return vecs * signs[:, None]


def sym_eigen_dense(s, max_sweeps=MAX_SWEEPS) -> EigenSystem:
    """Full eigendecomposition of a small symmetric matrix by Jacobi rotations.

    All eigenpairs are returned (negative eigenvalues included), sorted
    descending.
    """
    s = as_rows(s, "symmetric matrix")
    n = s.shape[0]
    if s.shape[1] != n:
        raise DataValidityError(f"matrix must be square, got shape {s.shape}")
    if np.max(np.abs(s - s.T)) > 1e-10:
        raise DataValidityError("matrix is not symmetric within 1e-10")
    w, v = _jacobi(0.5 * (s + s.T), max_sweeps)
    order = np.argsort(-w, kind="stable")
    return EigenSystem(w[order], _canonical_sign(v[:, order].T), float(np.trace(s)))


def scatter_eigen(centered, denom=1, tol=DEFAULT_EIG_TOL, max_sweeps=MAX_SWEEPS) -> EigenSystem:
    """Eigenpairs of ``centered.T @ centered / denom`` through the Gram matrix.

    Only pairs with eigenvalue above ``tol * (trace + 1e-300)`` are kept, so
    the rank never exceeds ``R - 1`` for genuinely centered input.
    """
    x = as_rows(centered, "centered matrix")
    if int(denom) != denom or denom < 1:
        raise DataValidityError(f"denom must be a positive integer, got {denom}")
    if tol < 0:
        raise DataValidityError(f"tol must be non-negative, got {tol}")
    c = x.shape[1]
    gram = (x @ x.T) / denom
    gram = 0.5 * (gram + gram.T)
    w, u = _jacobi(gram, max_sweeps)
    trace = float(np.sum(w))
    keep = w > tol * (trace + TRACE_FLOOR)
    if not np.any(keep):
        return EigenSystem(np.zeros(0), np.zeros((0, c)), max(trace, 0.0))
    w, u = w[keep], u[:, keep]
    order = np.argsort(-w, kind="stable")
    w, u = w[order], u[:, order]
    # v_i = X^T u_i / sqrt(denom * w_i) are unit vectors in column space
    vecs = (x.T @ u) / np.sqrt(denom * w)
    # one QR pass removes the rounding drift of the back-mapping
    qmat, rmat = np.linalg.qr(vecs)
    qmat = qmat * np.sign(np.where(np.diag(rmat) == 0, 1.0, np.diag(rmat)))
    return EigenSystem(w, _canonical_sign(qmat.T), trace)


def scatter_dense(centered, denom=1):
    """Explicit ``C x C`` scatter matrix; only for tests and small ``C``."""
    x = as_rows(centered, "centered matrix")
    return (x.T @ x) / denom
