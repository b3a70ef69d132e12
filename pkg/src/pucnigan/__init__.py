"""Multi-positive PU learning jointly trained with a classifier-noise-invariant
conditional GAN."""

from .cgan import GanVariant, build_variant, measuring_function
from .datasets import (OracleClassifier, PUDataset, load_image_dataset, make_pu_split,
                       make_synthetic_gaussian)
from .noise_model import ConfusionMatrix, TransitionMatrix, estimate_pg, permutation_diagnostics
from .pu_core import PURiskConfig, pretrain_pu, pu_risk_minibatch
from .trainer import Hyper, TrainingSchedule, joint_optimize

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix", "GanVariant", "Hyper", "OracleClassifier", "PUDataset", "PURiskConfig",
    "TrainingSchedule", "TransitionMatrix", "build_variant", "estimate_pg", "joint_optimize",
    "load_image_dataset", "make_pu_split", "make_synthetic_gaussian", "measuring_function",
    "permutation_diagnostics", "pretrain_pu", "pu_risk_minibatch",
]
