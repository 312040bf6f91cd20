"""Koopman latent dynamics for power-grid frequency trajectories through invertible encoders."""
from . import cli, extensions, flows, gridsim, koopman, numcore, optim, pipeline
from .extensions import HybridEncoder, build_extension, identity_ablation_encoder
from .flows import FlowStack, build_architecture
from .gridsim import Dataset, generate_dataset, ieee14, integrate, make_faults
from .koopman import KoopmanModel, KoopmanOperator, edmd_fit
from .numcore import Tensor, backward, no_grad, tensor
from .pipeline import ExperimentConfig, evaluate, load_checkpoint, rrmse, run_ablation, save_checkpoint, train

__version__ = "0.1.0"
