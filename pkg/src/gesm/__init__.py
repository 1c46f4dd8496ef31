"""Step-mixture graph neural network with its own sparse kernels and autodiff."""

from .data import GraphDataset, SplitSpec, load, make_split, save
from .graph import CsrMatrix, add_self_loops, column_normalize, spmm, transition_matrix, walk_step
from .model import VARIANTS, GesmParams, GesmVariant, forward, init_params
from .trainer import PRESETS, GesmConfig, TrainReport, evaluate, run_seeds, train

__version__ = "0.1.0"

__all__ = [
    "CsrMatrix", "GesmConfig", "GesmParams", "GesmVariant", "GraphDataset", "PRESETS", "SplitSpec",
    "TrainReport", "VARIANTS", "add_self_loops", "column_normalize", "evaluate", "forward",
    "init_params", "load", "make_split", "run_seeds", "save", "spmm", "train", "transition_matrix",
    "walk_step",
]
