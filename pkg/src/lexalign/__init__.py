"""Dual-encoder contrastive training with lexeme-region and global-region alignment."""

from lexalign.model import DualEncoder, ModelConfig, load_checkpoint, save_checkpoint
from lexalign.losses import (
    LossBundle,
    cosine_similarity,
    global_contrastive_loss,
    global_region_alignment_loss,
    lexeme_region_contrastive_loss,
    total_loss,
)
from lexalign.regions import Bbox, crop_region, roi_align

__all__ = [
    "Bbox",
    "DualEncoder",
    "LossBundle",
    "ModelConfig",
    "cosine_similarity",
    "crop_region",
    "global_contrastive_loss",
    "global_region_alignment_loss",
    "lexeme_region_contrastive_loss",
    "load_checkpoint",
    "roi_align",
    "save_checkpoint",
    "total_loss",
]

__version__ = "0.1.0"
