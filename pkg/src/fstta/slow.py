"""Slow phase: anchored update from the trajectory of end-of-sample states.

Every ``N`` samples the recorded parameter states, together with the anchor
produced by the previous slow update, are centered and decomposed. Axes of
large variation are oriented along a geometrically weighted reference
direction and summed with weights proportional to their variance. The step
is taken from the anchor, which discards the fast-phase drift accumulated
since the last slow update except for what the analysis retains.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataValidityError
from .linalg import DEFAULT_EIG_TOL, as_rows, as_vec, center_rows, scatter_eigen


@dataclass
class SlowConfig:
    N: int = 4
    lr: float = 1e-3
    q: float = 0.1
    eig_tol: float = DEFAULT_EIG_TOL
    sign_tol: float = 1e-10

    def __post_init__(self):
        if self.N < 1:
            raise DataValidityError(f"N must be >= 1, got {self.N}")
        if self.lr < 0:
            raise DataValidityError(f"slow lr must be non-negative, got {self.lr}")
        if not 0 < self.q < 1:
            raise DataValidityError(f"q must lie in (0, 1), got {self.q}")
        if self.sign_tol < 0:
            raise DataValidityError("sign_tol must be non-negative")


class Trajectory:
    """Anchor in slot 0 followed by up to ``N`` recorded states."""

    def __init__(self, anchor, N):
        self.anchor = as_vec(anchor, "anchor").copy()
        self.N = int(N)
        self.states = []

    def __len__(self):
        return 1 + len(self.states)

    @property
    def ready(self):
        return len(self.states) >= self.N

    def record(self, theta):
        if self.ready:
            raise DataValidityError("trajectory already holds N states")
        theta = as_vec(theta, "state")
        if theta.shape != self.anchor.shape:
            raise DataValidityError("state length differs from anchor length")
        self.states.append(theta.copy())

    def reset(self, anchor):
        self.anchor = as_vec(anchor, "anchor").copy()
        self.states = []

    def as_array(self):
        return np.vstack([self.anchor] + self.states)


def _trajectory_rows(traj):
    rows = traj.as_array() if isinstance(traj, Trajectory) else as_rows(traj, "trajectory")
    if rows.shape[0] < 2:
        raise DataValidityError("trajectory needs the anchor and at least one state")
    return rows


def reference_direction(traj, q=0.1):
    """Weighted mean of ``anchor - state_n``; recent states weigh most."""
    rows = _trajectory_rows(traj)
    n = rows.shape[0] - 1
    weights = q ** (n - np.arange(1, n + 1, dtype=np.float64))
    return (weights @ (rows[0] - rows[1:])) / weights.sum()


def slow_gradient(traj, h, eig_tol=DEFAULT_EIG_TOL, sign_tol=1e-10):
    """Sum of trajectory eigen-axes, each oriented along ``h``.

    Axis ``d`` is weighted by ``eps_d * |h| / |eps|`` so the result has the
    length of ``h`` when no axis is dropped. Axes nearly orthogonal to ``h``
    have no defined orientation and are dropped.
    """
    rows = _trajectory_rows(traj)
    h = np.asarray(h, dtype=np.float64)
    h_norm = np.linalg.norm(h)
    if h_norm == 0.0:
        return np.zeros(rows.shape[1])
    _, centered = center_rows(rows)
    eig = scatter_eigen(centered, rows.shape[0] - 1, eig_tol)
    if eig.rank == 0:
        return np.zeros(rows.shape[1])
    proj = eig.eigenvectors @ h
    keep = np.abs(proj) > sign_tol * h_norm
    if not np.any(keep):
        return np.zeros(rows.shape[1])
    eps = eig.eigenvalues[keep]
    psi = eps * h_norm / np.linalg.norm(eps)
    return (psi * np.sign(proj[keep])) @ eig.eigenvectors[keep]


def slow_step(anchor, grad, lr):
    """``anchor - lr * grad``; ``anchor`` is the previous slow result, not the live parameters."""
    return as_vec(anchor, "anchor") - lr * np.asarray(grad, dtype=np.float64)
