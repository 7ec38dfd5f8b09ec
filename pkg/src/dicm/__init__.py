"""Image-aware CTR prediction with a distributed trainer whose servers
co-train the shared image embedding sub-model."""

from .accounting import StorageReport, accounting, accounting_table
from .data import Sample, SampleGroup, SyntheticConfig, generate
from .images import FixedExtractor, ImageFeatureStore
from .inference import InferenceTable, KvPredictor, export_inference
from .metrics import auc, auc_pairwise, gauc, log_loss
from .model import (AggregatorSpec, DicmModel, FeatureSchema, FieldSpec,
                    PrerankModel, aggregate, forward_ctr, forward_prerank)
from .runtime import Cluster, ClusterConfig, run_training, shard_of
from .training import LocalTrainer, TrainConfig, evaluate_ctr

__version__ = "0.1.0"

__all__ = [
    "AggregatorSpec", "Cluster", "ClusterConfig", "DicmModel", "FeatureSchema",
    "FieldSpec", "FixedExtractor", "ImageFeatureStore", "InferenceTable",
    "KvPredictor", "LocalTrainer", "PrerankModel", "Sample", "SampleGroup",
    "StorageReport", "SyntheticConfig", "TrainConfig", "accounting",
    "accounting_table", "aggregate", "auc", "auc_pairwise", "evaluate_ctr",
    "export_inference", "forward_ctr", "forward_prerank", "gauc", "generate",
    "log_loss", "run_training", "shard_of",
]
