"""Memory-based multi-scale anomaly detection on a small numpy autodiff engine."""

from anomem.autodiff import Tensor, backward, no_grad
from anomem.config import ExperimentConfig
from anomem.data import LabeledImageSet, SyntheticSpec, gen_synthetic, make_one_vs_all_split
from anomem.detect import AnomalyScore, detector_score, fuse_scores
from anomem.encoder import EncoderSpec, encode, encoder_init
from anomem.errors import (
    AnoMemError,
    DimensionError,
    FormatError,
    NumericError,
    StateError,
    ValidationError,
)
from anomem.evaluate import auroc, linear_probe
from anomem.memory import HopfieldMemory, mem_gate
from anomem.pipeline import run_pipeline
from anomem.train import train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "ExperimentConfig",
    "LabeledImageSet",
    "SyntheticSpec",
    "gen_synthetic",
    "make_one_vs_all_split",
    "AnomalyScore",
    "detector_score",
    "fuse_scores",
    "EncoderSpec",
    "encode",
    "encoder_init",
    "AnoMemError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "StateError",
    "ValidationError",
    "auroc",
    "linear_probe",
    "HopfieldMemory",
    "mem_gate",
    "run_pipeline",
    "train_stage1",
    "train_stage2",
]
