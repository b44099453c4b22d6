"""Confidence-aware semi-supervised segmentation with an energy-based
latent prior, trained by Langevin-dynamics MCMC."""

from .config import ExperimentConfig
from .energy import EnergyPriorParams, energy, grad_z_energy, negative_energy
from .generator import GeneratorParams, forward, forward_batch
from .langevin import LangevinConfig, sample_posterior, sample_prior
from .losses import bce, dice_loss, entropy_map, phase2_loss, structure_loss
from .metrics import EvalReport, confidence_quality, f_max, mae
from .rng import RngStream
from .tensor import Tape, Tensor
from .trainer import TrainState, run_experiment

__all__ = [
    "ExperimentConfig", "EnergyPriorParams", "energy", "grad_z_energy",
    "negative_energy", "GeneratorParams", "forward", "forward_batch",
    "LangevinConfig", "sample_posterior", "sample_prior", "bce", "dice_loss",
    "entropy_map", "phase2_loss", "structure_loss", "EvalReport",
    "confidence_quality", "f_max", "mae", "RngStream", "Tape", "Tensor",
    "TrainState", "run_experiment",
]

__version__ = "0.1.0"
