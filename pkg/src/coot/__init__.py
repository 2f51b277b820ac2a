"""Hierarchical video/text joint embeddings trained with alignment, clustering
and cross-modal cycle-consistency losses, implemented on NumPy."""

from .config import ConfigError, RunConfig
from .data import Dataset, Sample, SynthConfig, generate_synthetic, make_batch, read_dataset, write_dataset
from .estimator import CootEmbedder, check_dataset
from .evaluation import RetrievalReport, evaluate, rank_all, report, retrieval
from .losses import LossConfig, cmc_loss, total_loss
from .model import CootModel, ModelConfig, load_checkpoint, save_checkpoint
from .numcore import Tensor, grad_check, no_grad
from .trainer import DivergenceError, OptimConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "RunConfig", "Dataset", "Sample", "SynthConfig", "generate_synthetic",
    "make_batch", "read_dataset", "write_dataset", "CootEmbedder", "check_dataset",
    "RetrievalReport", "evaluate", "rank_all", "report", "retrieval", "LossConfig", "cmc_loss",
    "total_loss", "CootModel", "ModelConfig", "load_checkpoint", "save_checkpoint", "Tensor",
    "grad_check", "no_grad", "DivergenceError", "OptimConfig", "train",
]
