"""Regression trees for finding subgroups with differential treatment effects."""
from .dataset import DataError, Dataset, Role, load_csv, load_gbsg2
from .tree import TreeConfig, TreeModel, estimate_effects, grow, report

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "Dataset",
    "Role",
    "TreeConfig",
    "TreeModel",
    "estimate_effects",
    "grow",
    "load_csv",
    "load_gbsg2",
    "report",
]
