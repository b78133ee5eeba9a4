"""Desk-scale robust training against combined label noise and data poisoning."""

from .corrupt import NoiseSpec, PoisonSpec, corrupt_labels, poison_data
from .datagen import Dataset, make_blobs, make_grid_images, train_test_split
from .model import MLP, TinyConv, build_model, predict
from .pgd import AttackBudget, pgd_attack
from .selection import SelectionConfig, select
from .trainer import TrainConfig, train, train_ce

__version__ = "0.1.0"

__all__ = [
    "AttackBudget",
    "Dataset",
    "MLP",
    "NoiseSpec",
    "PoisonSpec",
    "SelectionConfig",
    "TinyConv",
    "TrainConfig",
    "build_model",
    "corrupt_labels",
    "make_blobs",
    "make_grid_images",
    "pgd_attack",
    "poison_data",
    "predict",
    "select",
    "train",
    "train_ce",
    "train_test_split",
]
