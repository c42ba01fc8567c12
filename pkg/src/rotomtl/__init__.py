"""Per-task feature rotations and gradient-magnitude scaling for multitask models with a shared backbone.

Pure NumPy: a small MLP with hand-written backprop, per-task feature
rotations parametrized through the matrix exponential, the magnitude
scaling combiner and five baseline combiners, synthetic tasks, and a
config-driven CLI (``rotomtl``).
"""
from .combiners import COMBINERS, CombineResult, CombinerKind
from .rotation import RotationSet
from .trainer import OptimizerConfig, TrainConfig, fit, init_state, train_step

__all__ = [
    "COMBINERS",
    "CombineResult",
    "CombinerKind",
    "RotationSet",
    "OptimizerConfig",
    "TrainConfig",
    "fit",
    "init_state",
    "train_step",
]
__version__ = "0.1.0"
