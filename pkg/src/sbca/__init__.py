"""Sentiment-aware actor-critic portfolio allocation with gated price/text fusion."""

__version__ = "0.1.0"

from .agent import VARIANTS, PolicyNetwork, PolicyVariant, SBCAAllocator, TrainConfig, evaluate, train
from .dataio import FeatureScaler, PanelDataset, build_panel, split_time_series, synth_generate
from .env import CostModel, EnvState, RewardParams, rollout, step
from .evaluation import RunReport, ablation_grid, cost_sweep, run_buy_and_hold, run_equal_weight, run_index

__all__ = [
    "VARIANTS",
    "CostModel",
    "EnvState",
    "FeatureScaler",
    "PanelDataset",
    "PolicyNetwork",
    "PolicyVariant",
    "RewardParams",
    "RunReport",
    "SBCAAllocator",
    "TrainConfig",
    "ablation_grid",
    "build_panel",
    "cost_sweep",
    "evaluate",
    "rollout",
    "run_buy_and_hold",
    "run_equal_weight",
    "run_index",
    "split_time_series",
    "step",
    "synth_generate",
    "train",
]
