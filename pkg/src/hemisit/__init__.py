"""Hemispheric-asymmetry classification of 3D volumes with a symmetry-interactive transformer."""
from ._kernels import backend
from .data import SynthSpec, generate_synthetic, make_dataset, read_volume, write_volume
from .gradcam import gradcam
from .heads import MetricsReport, compute_metrics, joint_loss
from .model import VARIANTS, SITModel
from .tensor import Tape, Tensor
from .train import ModelConfig, build_model, evaluate, lr_schedule, run_variant
from .volume import Volume, extract_patches, flip_sagittal, pad_to_grid, reassemble, split_hemispheres

__version__ = "0.1.0"
