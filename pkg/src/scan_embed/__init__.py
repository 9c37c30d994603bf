"""Cross-modal image/recipe embedding with self-attention and semantic consistency, on a numpy autodiff engine."""
from .config import RunConfig, desk_config, load_config, full_scale_config
from .dataset import Dataset, FoodPairRecord, SyntheticConfig, load_dataset, save_dataset, split_dataset, synthetic_generate
from .encoders import ModelConfig, ModelParams, embed_records, init_params
from .evaluation import EvalReport, median_rank, rank_queries, recall_at_k, sampled_eval
from .losses import LossConfig, batch_hard_mine, semantic_consistency_loss, total_loss, triplet_loss
from .numerics import Tensor, no_grad
from .trainer import TrainConfig, Trainer, fit

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EvalReport", "FoodPairRecord", "LossConfig", "ModelConfig", "ModelParams", "RunConfig",
    "SyntheticConfig", "Tensor", "TrainConfig", "Trainer", "batch_hard_mine", "desk_config", "embed_records",
    "fit", "init_params", "load_config", "load_dataset", "median_rank", "no_grad", "full_scale_config",
    "rank_queries", "recall_at_k", "sampled_eval", "save_dataset", "semantic_consistency_loss",
    "split_dataset", "synthetic_generate", "total_loss", "triplet_loss",
]
