"""Latent diffusion over neural signed distance fields, in plain numpy.

Submodules: ``autodiff`` (tape-based reverse mode), ``nn`` (layers and Adam),
``geometry`` (procedural shapes, sampling, marching cubes, distances),
``modulation`` (point-cloud SDF-VAE), ``diffusion`` (x0-predicting denoiser),
``pipeline`` (training, fine-tuning, generation), ``metrics`` and ``cli``.
"""

from .autodiff import GradientTape, NonFiniteError, ShapeError, Tensor, finite_diff_check
from .diffusion import Denoiser, DenoiserConfig, make_schedule, q_sample, sample
from .modulation import ModulationConfig, ModulationModel, reconstruct_mesh
from .pipeline import (Checkpoint, TrainConfig, TrainingError, extract_latents, finetune_end_to_end,
                       generate, train_diffusion, train_modulation)

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "Denoiser", "DenoiserConfig", "GradientTape", "ModulationConfig",
    "ModulationModel", "NonFiniteError", "ShapeError", "Tensor", "TrainConfig", "TrainingError",
    "extract_latents", "finetune_end_to_end", "finite_diff_check", "generate", "make_schedule",
    "q_sample", "reconstruct_mesh", "sample", "train_diffusion", "train_modulation",
]
