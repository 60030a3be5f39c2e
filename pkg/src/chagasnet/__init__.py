"""Biomarker-pretrained ECG feature extraction and Chagas screening."""

from .binning import BiomarkerTargets, PercentileBinner, assign_bin, fit, join
from .evaluation import EvalReport, auc_roc, challenge_score, emit_distribution_plot, perplexity
from .infer import EnsemblePrediction, predict, segment_starts
from .ingest import (
    BIOMARKERS,
    ChagasLabel,
    ECGRecord,
    LabResult,
    SyntheticConfig,
    generate_synthetic,
    read_records,
    write_bundle,
)
from .labels import ResolvedLabelSet, reconcile
from .losses import bce_soft, masked_cross_entropy
from .model import ECGNet, ModelConfig, swap_head
from .optim import HybridOptimizer, OptimConfig, orthogonalize, partition, smooth_bins
from .preprocess import PreprocessConfig, Snippet, extract_snippet, resample, select_leads, standardize
from .train import FoldPlan, TrainConfig, build_finetune_data, build_pretrain_data, finetune, make_folds, pretrain

__version__ = "0.1.0"
