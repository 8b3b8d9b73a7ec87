"""Pretraining and retrieval-finetuning loops.

Both loops are single-threaded and draw every random decision from one
seeded generator, so a repeated run with the same config is bit-identical,
checkpoints included.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import numerics as nt
from ..data import Corpus
from ..masking import MaskedSample, MaskingConfig
from ..model import InterBert, ModelConfig
from ..negatives import make_itm_batch
from .losses import itm_loss, mrm_loss, msm_loss, total_loss
from .optim import AdamWState, adamw_step, ema_update, lr_at


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite."""


@dataclass
class TrainConfig:
    """Optimization hyperparameters. Loss weights default to 1 each; the
    hard-negative share stays at 0.2 because pushing it higher makes the
    matching task hard enough to stall early training."""

    lambda_msm: float = 1.0
    lambda_mrm: float = 1.0
    lambda_itm: float = 1.0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.9999
    eps: float = 1e-6
    weight_decay: float = 0.01
    warmup_steps: int = 100
    total_steps: int = 500
    batch_size: int = 16
    seed: int = 0
    ema_rate: float = 0.9999
    hard_negative_prob: float = 0.2
    mgm_on_negatives: bool = False
    itm_on_masked: bool = True
    num_distractors: int = 3
    precision: str = "float64"
    masking: MaskingConfig = field(default_factory=MaskingConfig)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.warmup_steps < 0 or self.total_steps < 1 or self.warmup_steps > self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps and total_steps >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 <= self.hard_negative_prob <= 1.0:
            raise ValueError("hard_negative_prob must be a probability")
        if not 0.0 <= self.ema_rate <= 1.0:
            raise ValueError("ema_rate must lie in [0, 1]")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")
        if self.num_distractors < 1:
            raise ValueError("need at least one distractor image")
        self.masking.validate()

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        data = dict(data)
        if "masking" in data and isinstance(data["masking"], dict):
            data["masking"] = MaskingConfig.from_dict(data["masking"])
        cfg = cls(**data)
        cfg.validate()
        return cfg


@dataclass
class StepMetrics:
    step: int
    lr: float
    msm_loss: float
    mrm_loss: float
    itm_loss: float
    total: float
    itm_acc: float

    CSV_HEADER = "step,lr,msm_loss,mrm_loss,itm_loss,total,itm_acc"

    def csv_row(self) -> str:
        return ",".join([
            str(self.step), repr(self.lr), repr(self.msm_loss), repr(self.mrm_loss),
            repr(self.itm_loss), repr(self.total), repr(self.itm_acc),
        ])


def write_metrics_csv(path, rows: list[StepMetrics]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(StepMetrics.CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.csv_row() + "\n")


def _batch_losses(model: InterBert, batch: list[MaskedSample], cfg: TrainConfig):
    """Forward the batch and assemble the three loss components."""
    itm_logits = []
    itm_labels = []
    token_logits, token_targets = [], []
    region_logits, region_targets = [], []
    for sample in batch:
        wants_mgm = sample.itm_label == 1 or cfg.mgm_on_negatives
        masked_out = model.forward(**sample.model_inputs()) if (cfg.itm_on_masked or wants_mgm) else None
        if cfg.itm_on_masked:
            itm_out = masked_out
        else:
            itm_out = model.forward(**sample.raw_model_inputs())
        itm_logits.append(model.itm_score(itm_out.pooled_image, itm_out.pooled_text))
        itm_labels.append(float(sample.itm_label))
        if wants_mgm:
            token_logits.append(model.msm_logits(masked_out.h_text))
            token_targets.append(sample.msm_targets)
            region_logits.append(model.mrm_logits(masked_out.h_image))
            region_targets.append(sample.mrm_targets)

    logit_vec = nt.reshape(nt.concat(itm_logits, axis=0), (len(itm_logits),))
    l_itm = itm_loss(logit_vec, itm_labels)
    l_msm = msm_loss(token_logits, token_targets)
    l_mrm = mrm_loss(region_logits, region_targets)
    predictions = logit_vec.values > 0.0
    accuracy = float(np.mean(predictions == (np.asarray(itm_labels) > 0.5)))
    return l_msm, l_mrm, l_itm, accuracy


@dataclass
class PretrainResult:
    model: InterBert
    metrics: list[StepMetrics]


def pretrain(corpus: Corpus, table: dict, model_cfg: ModelConfig, train_cfg: TrainConfig,
             step_callback=None) -> PretrainResult:
    """Run the masked-group + matching pretraining loop.

    Per step: assemble a half-positive batch with mined negatives in the
    mix, forward every sample, combine the weighted losses, backpropagate,
    and apply one scheduled AdamW update. Aborts on non-finite loss.
    """
    model_cfg.validate()
    train_cfg.validate()
    model = InterBert.create(model_cfg, seed=train_cfg.seed, dtype=train_cfg.dtype)
    state = AdamWState.for_params(model.params)
    rng = np.random.default_rng(train_cfg.seed)
    weights = (train_cfg.lambda_msm, train_cfg.lambda_mrm, train_cfg.lambda_itm)
    metrics: list[StepMetrics] = []
    for step in range(1, train_cfg.total_steps + 1):
        batch = make_itm_batch(corpus, table, rng, train_cfg.batch_size,
                               train_cfg.masking, train_cfg.hard_negative_prob)
        l_msm, l_mrm, l_itm, accuracy = _batch_losses(model, batch, train_cfg)
        loss = total_loss(l_msm, l_mrm, l_itm, weights)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        model.params.zero_grad()
        nt.backward(loss, model.params)
        lr = lr_at(step, train_cfg.learning_rate, train_cfg.warmup_steps, train_cfg.total_steps)
        adamw_step(model.params, state, lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                   eps=train_cfg.eps, weight_decay=train_cfg.weight_decay)
        row = StepMetrics(step=step, lr=lr, msm_loss=l_msm.item(), mrm_loss=l_mrm.item(),
                          itm_loss=l_itm.item(), total=value, itm_acc=accuracy)
        metrics.append(row)
        if step_callback is not None:
            step_callback(row)
    return PretrainResult(model=model, metrics=metrics)


@dataclass
class FinetuneMetrics:
    step: int
    lr: float
    loss: float
    accuracy: float

    CSV_HEADER = "step,lr,loss,accuracy"

    def csv_row(self) -> str:
        return ",".join([str(self.step), repr(self.lr), repr(self.loss), repr(self.accuracy)])


def write_finetune_csv(path, rows: list[FinetuneMetrics]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(FinetuneMetrics.CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.csv_row() + "\n")


@dataclass
class FinetuneResult:
    model: InterBert
    ema_values: dict[str, np.ndarray]
    metrics: list[FinetuneMetrics]


def finetune_retrieval(corpus: Corpus, model_cfg: ModelConfig, train_cfg: TrainConfig,
                       init_values: dict, step_callback=None) -> FinetuneResult:
    """Multiple-choice retrieval finetuning on top of pretrained weights.

    Each example scores the true image and sampled distractor images
    against the caption with the reused matching head; softmax
    cross-entropy over the choice logits trains the full network. No
    masking is applied. An exponential moving average of the parameters is
    maintained and returned alongside the raw weights.
    """
    model_cfg.validate()
    train_cfg.validate()
    image_ids = corpus.image_ids()
    if len(image_ids) < train_cfg.num_distractors + 1:
        raise ValueError(f"need at least {train_cfg.num_distractors + 1} images for multiple choice")
    model = InterBert.create(model_cfg, seed=train_cfg.seed, dtype=train_cfg.dtype)
    model.params.load_values(init_values)
    state = AdamWState.for_params(model.params)
    shadow = model.params.clone_values()
    rng = np.random.default_rng(train_cfg.seed)
    image_index = np.array(image_ids)
    metrics: list[FinetuneMetrics] = []
    for step in range(1, train_cfg.total_steps + 1):
        picks = rng.integers(0, len(corpus.pairs), size=train_cfg.batch_size)
        choice_logits = []
        for pick in picks:
            pair = corpus.pairs[int(pick)]
            pool = image_index[image_index != pair.image_id]
            distractors = rng.choice(pool, size=train_cfg.num_distractors, replace=False)
            logits = []
            for image_id in (pair.image_id, *distractors.tolist()):
                entry = corpus.image_entry(int(image_id))
                out = model.forward(tokens=pair.tokens, features=entry.features,
                                    bboxes=entry.bboxes, width=entry.width, height=entry.height)
                logits.append(model.itm_score(out.pooled_image, out.pooled_text))
            choice_logits.append(nt.concat(logits, axis=1))  # (1, 1 + distractors)
        stacked = nt.concat(choice_logits, axis=0)
        targets = np.zeros(len(choice_logits), dtype=np.int64)  # true image sits at slot 0
        loss = nt.cross_entropy_logits(stacked, targets)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        accuracy = float(np.mean(np.argmax(stacked.values, axis=1) == 0))
        model.params.zero_grad()
        nt.backward(loss, model.params)
        lr = lr_at(step, train_cfg.learning_rate, train_cfg.warmup_steps, train_cfg.total_steps)
        adamw_step(model.params, state, lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2,
                   eps=train_cfg.eps, weight_decay=train_cfg.weight_decay)
        ema_update(shadow, model.params, train_cfg.ema_rate)
        row = FinetuneMetrics(step=step, lr=lr, loss=value, accuracy=accuracy)
        metrics.append(row)
        if step_callback is not None:
            step_callback(row)
    return FinetuneResult(model=model, ema_values=shadow, metrics=metrics)
