"""Optimal-transport toolkit for unsupervised few-shot learning at desk scale."""

from .dyce import DyceConfig, MemoryState, dyce_step
from .episodes import EpisodeSpec, LabeledEmbeddingSet, PipelineConfig, SyntheticSpec, evaluate, gen_synthetic
from .errors import OTFSError
from .loss import LossConfig, loss_and_grad
from .opta import OptaConfig, class_prototypes, opta_iterate
from .ot import SinkhornConfig, TransportPlan, pairwise_cost, sinkhorn
from .pretrain import TrainConfig, run_pretraining

__version__ = "0.1.0"

__all__ = [
    "DyceConfig",
    "EpisodeSpec",
    "LabeledEmbeddingSet",
    "LossConfig",
    "MemoryState",
    "OTFSError",
    "OptaConfig",
    "PipelineConfig",
    "SinkhornConfig",
    "SyntheticSpec",
    "TrainConfig",
    "TransportPlan",
    "class_prototypes",
    "dyce_step",
    "evaluate",
    "gen_synthetic",
    "loss_and_grad",
    "opta_iterate",
    "pairwise_cost",
    "run_pretraining",
    "sinkhorn",
]
