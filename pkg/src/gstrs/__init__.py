"""Group-sensitive triplet metric learning toolkit.

Intra-class-variance-aware triplet losses with analytic gradients,
unsupervised within-class grouping, group-sensitive batch sampling, a
small trainable embedding, and retrieval/re-identification evaluation.
"""

from .data import (
    DatasetManifest,
    SynthSpec,
    generate_synthetic,
    load_features,
    load_manifest,
    save_features,
    save_manifest,
    split_roles,
)
from .evaluation import (
    EvalReport,
    RankedResult,
    average_precision,
    classification_accuracy,
    cmc_curve,
    evaluate_retrieval,
    precision_at_k,
    rank_gallery,
)
from .grouping import WithinClassKMeans, group_centers
from .losses import (
    GradCheckReport,
    LossConfig,
    LossOutput,
    TripletContext,
    grad_check,
    gs_trs_loss,
    hardest_negative,
    icv_triplet_loss,
    mean_anchor,
    mean_valued_triplet_loss,
    softmax_cross_entropy,
    triplet_loss,
)
from .model import (
    ClassifierHead,
    EmbeddingModel,
    backprop_embedding,
    embed,
    init_embedding,
    init_head,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .numerics import PcaReducer, l2_normalize, l2_normalize_rows, squared_distance
from .sampling import Batch, BatchSpec, build_contexts, epoch_batches, epoch_iterator, sample_batch
from .trainer import LOSS_MODES, GsTrsEmbedder

__version__ = "0.1.0"

__all__ = [
    "DatasetManifest",
    "SynthSpec",
    "generate_synthetic",
    "load_features",
    "load_manifest",
    "save_features",
    "save_manifest",
    "split_roles",
    "EvalReport",
    "RankedResult",
    "average_precision",
    "classification_accuracy",
    "cmc_curve",
    "evaluate_retrieval",
    "precision_at_k",
    "rank_gallery",
    "WithinClassKMeans",
    "group_centers",
    "GradCheckReport",
    "LossConfig",
    "LossOutput",
    "TripletContext",
    "grad_check",
    "gs_trs_loss",
    "hardest_negative",
    "icv_triplet_loss",
    "mean_anchor",
    "mean_valued_triplet_loss",
    "softmax_cross_entropy",
    "triplet_loss",
    "ClassifierHead",
    "EmbeddingModel",
    "backprop_embedding",
    "embed",
    "init_embedding",
    "init_head",
    "load_checkpoint",
    "save_checkpoint",
    "sgd_step",
    "PcaReducer",
    "l2_normalize",
    "l2_normalize_rows",
    "squared_distance",
    "Batch",
    "BatchSpec",
    "build_contexts",
    "epoch_batches",
    "epoch_iterator",
    "sample_batch",
    "LOSS_MODES",
    "GsTrsEmbedder",
]
