"""Learned, budget-constrained dynamic channel selection for sensor networks."""

from .data import Dataset, SyntheticTaskSpec, generate
from .dsf import DynamicSpatialFilter, apply_dsf, masked_covariance
from .gating import (
    ChannelMask,
    GateScores,
    GumbelConfig,
    Mode,
    SparsityBudget,
    Topology,
    make_scorer,
    sample_mask,
    sparsity_loss,
)
from .model import DynamicSelectionNet
from .msfbcnn import MSFBCNN, ClassifierConfig, param_count_closed_form
from .training import Checkpoint, TrainConfig, joint_loss, run_schedule
from .wsn import NoiseModel, TransmissionLedger, inject_noise, random_baseline, simulate

__all__ = [
    "ChannelMask", "Checkpoint", "ClassifierConfig", "Dataset", "DynamicSelectionNet",
    "DynamicSpatialFilter", "GateScores", "GumbelConfig", "MSFBCNN", "Mode", "NoiseModel",
    "SparsityBudget", "SyntheticTaskSpec", "Topology", "TrainConfig", "TransmissionLedger",
    "apply_dsf", "generate", "inject_noise", "joint_loss", "make_scorer", "masked_covariance",
    "param_count_closed_form", "random_baseline", "run_schedule", "sample_mask", "simulate",
    "sparsity_loss",
]
