"""Slow step from the anchor along the end-of-sample trajectory."""
import numpy as np

from fstta.slow import SlowConfig, reference_direction, slow_gradient, slow_step

rng = np.random.default_rng(1)
anchor = np.zeros(6)
drift = np.linspace(0, 1, 5)[:, None] * np.array([1.0, 0.5, 0, 0, 0, 0])
traj = anchor + drift + rng.normal(0, 0.05, (5, 6))
traj[0] = anchor

cfg = SlowConfig(lr=1.0)
h = reference_direction(traj, cfg.q)
g = slow_gradient(traj, h)
print("h       ", np.round(h, 3))
print("grad    ", np.round(g, 3))
print("new     ", np.round(slow_step(anchor, g, cfg.lr), 3))
print("last fast state", np.round(traj[-1], 3))
