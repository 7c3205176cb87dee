"""Dynamic self-attention network for dynamic graph representation learning."""

from .graph import Snapshot, SnapshotSequence, load_snapshots, neighborhood, save_snapshots
from .layers import ModelConfig, ModelParams, init_params, model_forward
from .sampling import SamplerConfig, WalkCorpus, build_corpus
from .training import TrainConfig, fit, incremental_fit, RepresentationStore
from .evaluation import EvalReport, auc, evaluate

__version__ = "0.1.0"

__all__ = [
    "Snapshot", "SnapshotSequence", "load_snapshots", "save_snapshots", "neighborhood",
    "ModelConfig", "ModelParams", "init_params", "model_forward",
    "SamplerConfig", "WalkCorpus", "build_corpus",
    "TrainConfig", "fit", "incremental_fit", "RepresentationStore",
    "EvalReport", "auc", "evaluate",
]
