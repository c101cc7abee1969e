"""Online adaptation loop and the strategy family compared against it.

An ``AdaptSession`` owns the live adaptable parameters of one stream. The
episode runner feeds it one entropy gradient per action step and signals
sample boundaries; the session decides when to take fast steps, when to
record trajectory states and when to take a slow step from the anchor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import model
from .errors import DataValidityError, NumericalError
from .fast import FastConfig, FastPhaseState, GradientWindow, fast_step
from .slow import SlowConfig, Trajectory, reference_direction, slow_gradient, slow_step

log = logging.getLogger(__name__)

KINDS = ("no_adapt", "tent_interval", "tent_stable", "fast_only", "fast_slow")


@dataclass(frozen=True)
class Strategy:
    """One adaptation variant with its hyperparameters.

    ``tent_interval`` averages the last ``k`` step gradients and steps with a
    fixed rate; ``tent_stable`` is ``k = 1`` with a reset to the pristine
    parameters at every sample start; ``fast_only`` and ``fast_slow`` use
    the eigen-analysed fast step, the latter adding the slow phase.
    """

    kind: str
    k: int = 1
    fast: FastConfig = field(default_factory=FastConfig)
    slow: SlowConfig = field(default_factory=SlowConfig)
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataValidityError(f"unknown strategy kind {self.kind!r}; expected one of {KINDS}")
        if self.k < 1:
            raise DataValidityError(f"interval k must be >= 1, got {self.k}")
        if self.kind in ("fast_only", "fast_slow") and self.fast.M < 2:
            raise DataValidityError("the eigen-analysed fast step needs M >= 2")

    @property
    def name(self):
        if self.label:
            return self.label
        if self.kind == "no_adapt":
            return "NoAdapt"
        if self.kind == "tent_interval":
            return f"Tent-INT-{self.k}"
        if self.kind == "tent_stable":
            return "Tent-Stable"
        base = "FastOnly" if self.kind == "fast_only" else "FSTTA"
        return base if self.fast.dlr else base + "-noDLR"

    @property
    def adapts(self):
        return self.kind != "no_adapt"

    @property
    def window_size(self):
        if self.kind in ("fast_only", "fast_slow"):
            return self.fast.M
        return 1 if self.kind == "tent_stable" else self.k

    @classmethod
    def no_adapt(cls):
        return cls("no_adapt")

    @classmethod
    def tent_interval(cls, k=1, fast=None):
        return cls("tent_interval", k=k, fast=fast or FastConfig())

    @classmethod
    def tent_stable(cls, fast=None):
        return cls("tent_stable", fast=fast or FastConfig())

    @classmethod
    def fast_only(cls, fast=None, dlr=True):
        return cls("fast_only", fast=replace(fast or FastConfig(), dlr=dlr))

    @classmethod
    def fast_slow(cls, fast=None, slow=None, dlr=True):
        return cls("fast_slow", fast=replace(fast or FastConfig(), dlr=dlr), slow=slow or SlowConfig())


def entropy_gradient_hook(params, step, theta=None):
    """``(probs, entropy, d entropy / d theta)``; never mutates ``params``."""
    return model.backward_adaptable(params, step, theta)


class AdaptSession:
    """Parameter state of one online adaptation stream."""

    def __init__(self, params: model.PolicyParams, strategy: Strategy):
        self.params = params
        self.strategy = strategy
        self.pristine = params.adaptable_vector().copy()
        self.theta = self.pristine.copy()
        self.anchor = self.pristine.copy()
        self.window = GradientWindow(strategy.window_size, self.pristine.size)
        self.fast_state = FastPhaseState()
        self.traj = Trajectory(self.anchor, strategy.slow.N)
        self.j = 0  # fast updates in the current sample
        self.o = 0  # finished samples
        self.l = 0  # slow updates
        self.fast_updates = 0
        self.skipped_gradients = 0
        self.numerical_failures = 0
        self.slow_log = []

    @property
    def adapting(self):
        return self.strategy.adapts

    def policy(self):
        return self.params.with_adaptable(self.theta)

    def score(self, step):
        return model.score_actions(self.params, step, self.theta)

    def entropy_gradient(self, step):
        return entropy_gradient_hook(self.params, step, self.theta)

    def on_sample_start(self):
        if self.strategy.kind == "tent_stable":
            self.theta = self.pristine.copy()
        self.window.clear()
        self.j = 0

    def on_action_step(self, g):
        if not self.adapting:
            return
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.theta.shape or not np.all(np.isfinite(g)):
            self.skipped_gradients += 1
            return
        self.window.append(g)
        if self.window.full:
            self._update()

    def _update(self):
        kind = self.strategy.kind
        if kind in ("tent_interval", "tent_stable"):
            self.theta = self.theta - self.strategy.fast.base_lr * self.window.as_array().mean(axis=0)
            self.window.clear()
        else:
            try:
                self.theta = fast_step(self.theta, self.window, self.fast_state, self.strategy.fast)
            except NumericalError as exc:
                log.warning("fast step skipped: %s", exc)
                self.numerical_failures += 1
                self.window.clear()
                return
        self.j += 1
        self.fast_updates += 1

    def _flush(self):
        minimum = 1 if self.strategy.kind in ("tent_interval", "tent_stable") else 2
        if self.window.count >= minimum:
            self._update()
        self.window.clear()

    def on_sample_end(self):
        if not self.adapting:
            self.o += 1
            return
        self._flush()
        self.o += 1
        self.j = 0
        if self.strategy.kind != "fast_slow":
            return
        self.traj.record(self.theta)
        if self.traj.ready:
            cfg = self.strategy.slow
            h = reference_direction(self.traj, cfg.q)
            try:
                grad = slow_gradient(self.traj, h, cfg.eig_tol, cfg.sign_tol)
            except NumericalError as exc:
                log.warning("slow step skipped: %s", exc)
                self.numerical_failures += 1
                grad = np.zeros_like(h)
            prev = self.anchor
            self.theta = slow_step(prev, grad, cfg.lr)
            self.anchor = self.theta.copy()
            self.traj.reset(self.anchor)
            self.l += 1
            self.slow_log.append((prev, grad, self.anchor))

    def diagnostics(self):
        return {
            "fast_updates": self.fast_updates,
            "slow_updates": self.l,
            "samples": self.o,
            "skipped_gradients": self.skipped_gradients,
            "numerical_failures": self.numerical_failures,
            "theta_drift": float(np.linalg.norm(self.theta - self.pristine)),
        }
