"""From-scratch CNN for pediatric chest X-ray pneumonia detection, with an
ontology reasoning layer fused into the final decision."""

from .errors import (
    ConfigError,
    CorruptCheckpointError,
    DataError,
    OntologyError,
    OutputError,
    PneumoError,
    ShapeError,
    UsageError,
)
from .metrics import ConfusionMatrix, compute_metrics, roc_auc
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .ontology import fuse_decision, infer, parse_ontology
from .tensor import PCG32
from .train import TrainConfig, train

__version__ = "0.1.0"
