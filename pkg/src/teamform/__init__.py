"""Leader/follower team formation for cooperative multi-agent reinforcement learning.

Agents score one another through attention, leaders and followers are paired
by stable (``oom``) or greedy (``som``) matching, and a group-aware
value-decomposition network learns from the resulting teams.
"""

from .diffcore import ParameterStore, Tensor, grad_check, load_checkpoint, save_checkpoint
from .env import WorldConfig
from .errors import ConfigError, ContractError, DimensionError, SizeLimitError, TeamformError
from .harness import cli, composition_table, evaluate
from .losses import LossReport, total_loss
from .matching import (CapacityPlan, Grouping, PreferenceMatrix, balance_capacities,
                       enumerate_stable_matchings, find_blocking_pairs, oom_match, som_match)
from .nets import ModelConfig, init_params
from .training import TrainConfig, train

__all__ = [
    "CapacityPlan", "ConfigError", "ContractError", "DimensionError", "Grouping", "LossReport",
    "ModelConfig", "ParameterStore", "PreferenceMatrix", "SizeLimitError", "TeamformError",
    "Tensor", "TrainConfig", "WorldConfig", "balance_capacities", "cli", "composition_table",
    "enumerate_stable_matchings", "evaluate", "find_blocking_pairs", "grad_check", "init_params",
    "load_checkpoint", "oom_match", "save_checkpoint", "som_match", "total_loss", "train",
]
