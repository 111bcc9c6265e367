"""Constrained learning of AC optimal power flow with graph attention networks."""

from .case_io import PowerSystem, load_case
from .gat import GatConfig, GatModel
from .duals import TrainingConfig, train
from .data import Dataset, load_dataset, make_dataset, save_dataset

__version__ = "0.1.0"

__all__ = [
    "PowerSystem",
    "load_case",
    "GatConfig",
    "GatModel",
    "TrainingConfig",
    "train",
    "Dataset",
    "load_dataset",
    "make_dataset",
    "save_dataset",
]
