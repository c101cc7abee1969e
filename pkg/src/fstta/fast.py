"""Fast phase: concordant gradient from a short window of step gradients.

Every ``M`` action steps the window of step gradients is centered and its
covariance decomposed. Components of the mean gradient are re-weighted by
inverse variance along each axis (low-variance axes are the ones the steps
agree on), the result is rescaled to the mean gradient's length, and a step
is taken with a learning rate modulated by how far the covariance trace
strays from its running average.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataValidityError, InsufficientWindowError
from .linalg import DEFAULT_EIG_TOL, as_rows, as_vec, center_rows, scatter_eigen

NULL_FLOOR = 1e-12


@dataclass
class FastConfig:
    M: int = 3
    base_lr: float = 6e-4
    tau: float = 0.7
    rho: float = 0.95
    trunc_lo: float = 0.9
    trunc_hi: float = 1.1
    phi_eps: float = 1e-6
    eig_tol: float = DEFAULT_EIG_TOL
    dlr: bool = True

    def __post_init__(self):
        if self.M < 1:
            raise DataValidityError(f"M must be >= 1, got {self.M}")
        if not self.base_lr > 0:
            raise DataValidityError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.rho < 1:
            raise DataValidityError(f"rho must lie in [0, 1), got {self.rho}")
        if self.trunc_lo > self.trunc_hi:
            raise DataValidityError("trunc_lo must not exceed trunc_hi")
        if self.phi_eps < 0:
            raise DataValidityError("phi_eps must be non-negative")


@dataclass
class FastPhaseState:
    """Running average of the gradient-covariance trace, kept for the whole stream."""

    sigma_bar: float = 0.0
    initialized: bool = False


class GradientWindow:
    """Fixed-capacity buffer of step gradients."""

    def __init__(self, capacity, dim=None):
        if capacity < 1:
            raise DataValidityError(f"capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.dim = dim
        self._grads = []

    def __len__(self):
        return len(self._grads)

    @property
    def count(self):
        return len(self._grads)

    @property
    def full(self):
        return len(self._grads) >= self.capacity

    def append(self, g):
        if self.full:
            raise DataValidityError("gradient window is already full")
        g = as_vec(g, "gradient")
        if self.dim is None:
            self.dim = g.size
        elif g.size != self.dim:
            raise DataValidityError(f"gradient length {g.size} != window dim {self.dim}")
        self._grads.append(g.copy())

    def clear(self):
        self._grads = []

    def as_array(self):
        return np.array(self._grads)


def concordant_gradient(grads, phi_eps=1e-6, eig_tol=DEFAULT_EIG_TOL, phi=None):
    """Concordant update direction for a window of gradients.

    Returns ``(grad, sigma)``: ``grad`` has the same length as the window's
    mean gradient, ``sigma`` is the trace of the window covariance.

    Each eigen-axis gets weight ``1 / (lambda + phi_eps * sigma)``; the part of
    the mean gradient outside the retained eigenspace has zero variance and
    gets the ``lambda -> 0`` limit of that weight. ``phi`` may override the
    weighting with a callable ``phi(eigenvalues, sigma) -> (axis_weights,
    null_weight)``, which the tests use to probe the degenerate cases.
    """
    if isinstance(grads, GradientWindow):
        grads = grads.as_array()
    g = as_rows(grads, "gradient window")
    m = g.shape[0]
    if m < 2:
        raise InsufficientWindowError(f"need at least 2 gradients, window holds {m}")
    mean, centered = center_rows(g)
    eig = scatter_eigen(centered, m - 1, eig_tol)
    sigma = eig.trace
    mean_norm = np.linalg.norm(mean)
    if mean_norm == 0.0:
        return np.zeros_like(mean), sigma
    if eig.rank == 0 and phi is None:
        return mean.copy(), sigma

    coords = eig.eigenvectors @ mean
    null_part = mean - eig.eigenvectors.T @ coords
    # projection round-off would otherwise be amplified by the null weight
    if eig.rank == mean.size or np.linalg.norm(null_part) <= NULL_FLOOR * mean_norm:
        null_part = np.zeros_like(mean)
    if phi is None:
        axis_w = 1.0 / (eig.eigenvalues + phi_eps * sigma)
        null_w = 1.0 / (phi_eps * sigma) if phi_eps > 0 else np.inf
    else:
        axis_w, null_w = phi(eig.eigenvalues, sigma)
        axis_w = np.broadcast_to(np.asarray(axis_w, dtype=np.float64), eig.eigenvalues.shape)

    if np.isinf(null_w):
        # exact inverse variance: the null space dominates whenever present
        if np.linalg.norm(null_part) > 0.0:
            out = null_part
        else:
            out = eig.eigenvectors.T @ (coords / eig.eigenvalues)
    else:
        # divide through by null_w first to keep the sum well scaled
        out = eig.eigenvectors.T @ (coords * (axis_w / null_w)) + null_part

    out_norm = np.linalg.norm(out)
    if out_norm == 0.0:
        return np.zeros_like(mean), sigma
    return out * (mean_norm / out_norm), sigma


def truncate(x, lo, hi):
    return min(max(x, lo), hi)


def dynamic_lr(sigma, state: FastPhaseState, cfg: FastConfig):
    """Learning rate for one fast step; updates ``state.sigma_bar`` in place."""
    if not sigma >= 0 or not np.isfinite(sigma):
        raise DataValidityError(f"sigma must be finite and >= 0, got {sigma}")
    if not state.initialized:
        state.sigma_bar = float(sigma)
        state.initialized = True
        deviation = 0.0
    else:
        deviation = abs(sigma - state.sigma_bar)
        # rho * bar + (1 - rho) * sigma, written so a constant sigma is a fixed point
        state.sigma_bar = state.sigma_bar + (1.0 - cfg.rho) * (sigma - state.sigma_bar)
    if not cfg.dlr:
        return cfg.base_lr
    return truncate(1.0 + cfg.tau - deviation, cfg.trunc_lo, cfg.trunc_hi) * cfg.base_lr


def fast_step(theta, window, state: FastPhaseState, cfg: FastConfig):
    """One fast update ``theta - lr * grad``; clears ``window``."""
    theta = as_vec(theta, "theta")
    grads = window.as_array() if isinstance(window, GradientWindow) else window
    grad, sigma = concordant_gradient(grads, cfg.phi_eps, cfg.eig_tol)
    lr = dynamic_lr(sigma, state, cfg)
    if isinstance(window, GradientWindow):
        window.clear()
    return theta - lr * grad
