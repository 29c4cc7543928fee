"""Desk-scale semantic segmentation with domain-based batch normalisation.

A numpy tape autodiff drives a two-stream backbone, an object-contextual
head and hierarchical multi-scale attention fusion, trained on synthetic
multi-domain shape scenes.
"""

from .checkpoint import CheckpointError
from .data import DatasetManifest, SegDataset, domain_batch_scheduler, generate_domain_dataset, load_split
from .estimator import DomainSegmenter
from .gradcheck import GradCheckReport, grad_check
from .hma import hierarchical_fuse, training_cost
from .metrics import ConfusionMatrix, miou
from .model import ModelConfig, SegmentationModel
from .norm import DomainBatchNorm, UnseenDomainWarning
from .tensor import ShapeError, Tape, Tensor
from .train import TrainConfig, evaluate, load_checkpoint, poly_lr, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfusionMatrix", "DatasetManifest", "DomainBatchNorm", "DomainSegmenter",
    "GradCheckReport", "ModelConfig", "SegDataset", "SegmentationModel", "ShapeError", "Tape", "Tensor",
    "TrainConfig", "UnseenDomainWarning", "domain_batch_scheduler", "evaluate", "generate_domain_dataset",
    "grad_check", "hierarchical_fuse", "load_checkpoint", "load_split", "miou", "poly_lr", "save_checkpoint",
    "train", "training_cost",
]
