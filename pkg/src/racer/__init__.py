"""Risk-averse distributional actor-critic with ensemble critics and adaptive action limits."""

from .riskmeasures import CategoricalDistribution, cvar, cvar_gap, emd, mixture, tail, var
from .trainer import TrainerConfig, evaluate_policy, train

__all__ = [
    "CategoricalDistribution",
    "TrainerConfig",
    "cvar",
    "cvar_gap",
    "emd",
    "evaluate_policy",
    "mixture",
    "tail",
    "train",
    "var",
]
__version__ = "0.1.0"
