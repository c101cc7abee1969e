"""Fast-slow online adaptation for a toy instruction-following navigator."""

__version__ = "0.1.0"

from .engine import AdaptSession, Strategy  # noqa: E402
from .fast import FastConfig, concordant_gradient, dynamic_lr, fast_step  # noqa: E402
from .linalg import EigenSystem, scatter_eigen, sym_eigen_dense  # noqa: E402
from .slow import SlowConfig, reference_direction, slow_gradient, slow_step  # noqa: E402

__all__ = [
    "AdaptSession", "Strategy", "FastConfig", "SlowConfig", "EigenSystem",
    "concordant_gradient", "dynamic_lr", "fast_step", "scatter_eigen", "sym_eigen_dense",
    "reference_direction", "slow_gradient", "slow_step",
]
