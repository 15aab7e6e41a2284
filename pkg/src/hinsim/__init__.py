"""Exact PathSim computation and NeuPath-style learned approximation on typed graphs."""

from .hin import GraphError, HinGraph, MetaPath, NetworkSchema, load_graph, parse_metapath, save_graph, synth_graph
from .model import ModelParams, forward_all, init_params, load_checkpoint, save_checkpoint
from .pathsim import PathSimEngine, commuting_matrix, count_paths_bruteforce, pathsim, pathsim_row, topk_search

__version__ = "0.1.0"

__all__ = [
    "GraphError",
    "HinGraph",
    "MetaPath",
    "ModelParams",
    "NetworkSchema",
    "PathSimEngine",
    "commuting_matrix",
    "count_paths_bruteforce",
    "forward_all",
    "init_params",
    "load_checkpoint",
    "load_graph",
    "parse_metapath",
    "pathsim",
    "pathsim_row",
    "save_checkpoint",
    "save_graph",
    "synth_graph",
    "topk_search",
]
