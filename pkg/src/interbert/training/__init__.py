"""Loss assembly, optimization, and the training loops."""

from .losses import itm_loss, masked_token_loss, mrm_loss, msm_loss, total_loss
from .loop import (
    FinetuneMetrics,
    FinetuneResult,
    PretrainResult,
    StepMetrics,
    TrainConfig,
    TrainingDiverged,
    finetune_retrieval,
    pretrain,
    write_finetune_csv,
    write_metrics_csv,
)
from .optim import AdamWState, adamw_step, ema_update, lr_at

__all__ = [
    "AdamWState",
    "FinetuneMetrics",
    "FinetuneResult",
    "PretrainResult",
    "StepMetrics",
    "TrainConfig",
    "TrainingDiverged",
    "adamw_step",
    "ema_update",
    "finetune_retrieval",
    "itm_loss",
    "lr_at",
    "masked_token_loss",
    "mrm_loss",
    "msm_loss",
    "pretrain",
    "total_loss",
    "write_finetune_csv",
    "write_metrics_csv",
]
