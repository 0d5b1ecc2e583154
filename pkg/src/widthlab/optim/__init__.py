from ._kernels import BACKEND
from .config import (
    Decay,
    EpsilonMode,
    EpsilonPolicy,
    LearningRateSchedule,
    OptimizerConfig,
    OptimizerFamily,
    effective_lr,
    epsilon_for,
    per_layer_epsilon,
)
from .core import NonFiniteGradientError, OptimizerState, adam_update, init_state, step

__all__ = [
    "BACKEND",
    "Decay",
    "EpsilonMode",
    "EpsilonPolicy",
    "LearningRateSchedule",
    "NonFiniteGradientError",
    "OptimizerConfig",
    "OptimizerFamily",
    "OptimizerState",
    "adam_update",
    "effective_lr",
    "epsilon_for",
    "init_state",
    "per_layer_epsilon",
    "step",
]
