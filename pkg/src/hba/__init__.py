"""Hierarchical LiDAR bundle adjustment with top-down pose-graph refinement."""
from .ba import BaConfig, BaProblem, WindowResult, solve_window
from .errors import HbaError
from .evaluation import ate, mme
from .geometry import Pose
from .io import Frame, load_sequence, load_trajectory, write_trajectory
from .pipeline import PipelineConfig, run, run_direct_assign, run_original_ba, run_reduced_ba
from .posegraph import FactorGraph, GraphConfig, build_graph, optimize
from .pyramid import PyramidConfig, build_pyramid, select_layers
from .synth import SceneSpec, generate

__all__ = [
    "BaConfig", "BaProblem", "FactorGraph", "Frame", "GraphConfig", "HbaError", "PipelineConfig",
    "Pose", "PyramidConfig", "SceneSpec", "WindowResult", "ate", "build_graph", "build_pyramid",
    "generate", "load_sequence", "load_trajectory", "mme", "optimize", "run",
    "run_direct_assign", "run_original_ba", "run_reduced_ba", "select_layers", "solve_window",
    "write_trajectory",
]
