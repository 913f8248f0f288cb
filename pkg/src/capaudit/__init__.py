"""Audit black-box sequence generators for training on unauthorized data."""

from .audit import AuditReport, auc_gain, find_violations, precision_at_k, rank_by_distance
from .datagen import DatasetBundle, Label, SequenceSample, generate_synthetic, load_bundle, save_bundle, window_and_split
from .extreme_stats import GpdFit, PatienceState, fit_gpd, gpd_quantile, patience_step, select_threshold
from .models import ModelConfig, Seq2SeqModel, build_model, distance, load_checkpoint, save_checkpoint
from .training import TrainReport, train_prompter_baseline, train_prompter_optimized, train_target

__version__ = "0.1.0"
