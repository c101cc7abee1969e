"""Concordant gradient on a window whose steps disagree along one axis."""
import numpy as np

from fstta.fast import FastConfig, FastPhaseState, concordant_gradient, dynamic_lr

# the steps agree on axis 0 and fight on axis 1
window = np.array([[1.0, 2.0], [1.1, -1.8], [0.9, 0.1]])
grad, sigma = concordant_gradient(window)
print("mean       ", window.mean(axis=0))
print("concordant ", grad, " same norm:", np.isclose(np.linalg.norm(grad), np.linalg.norm(window.mean(0))))

cfg, state = FastConfig(), FastPhaseState()
for s in (0.5, 0.5, 0.9, 2.0, 0.5):
    lr = dynamic_lr(s, state, cfg)
    print(f"sigma {s:.1f}  sigma_bar {state.sigma_bar:.3f}  lr {lr:.2e}")
