"""Desk-scale laboratory for LoRA and periodically unloaded LoRA (PLoRA)."""

from .linalg import SeededRng, gaussian_matrix, numerical_rank, svd
from .model import LinearLayer, LoraAdapter, Network, Regime, build_network, init_adapter
from .optim import AdamWParams, OptimState, adamw_step
from .plora import MomentumMode, PloraConfig, PloraController, cumulative_update, unload

__version__ = "0.1.0"

__all__ = [
    "AdamWParams",
    "LinearLayer",
    "LoraAdapter",
    "MomentumMode",
    "Network",
    "OptimState",
    "PloraConfig",
    "PloraController",
    "Regime",
    "SeededRng",
    "adamw_step",
    "build_network",
    "cumulative_update",
    "gaussian_matrix",
    "init_adapter",
    "numerical_rank",
    "svd",
    "unload",
]
