"""Heterogeneous graph attention surrogate for coupled fluid/solid dynamics."""

from .errors import HetSolverError
from .hetgraph import HeteroGraph, NodeKind, NodeWindow, RelationKind, build_graph
from .model import Ablation, ModelConfig, forward, init_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Ablation", "HetSolverError", "HeteroGraph", "ModelConfig", "NodeKind", "NodeWindow",
    "RelationKind", "build_graph", "forward", "init_params", "load_checkpoint", "save_checkpoint",
]
