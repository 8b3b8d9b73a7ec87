"""Loss assembly for the three pretraining objectives."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import numerics as nt
from ..numerics import Tensor


def masked_token_loss(logits_list: Sequence[Tensor], targets_list: Sequence[np.ndarray]) -> Tensor:
    """Cross-entropy averaged over every non-ignored position in the batch;
    exactly zero when nothing is masked."""
    if len(logits_list) != len(targets_list):
        raise ValueError("one target array per logits block required")
    if not logits_list:
        return Tensor(0.0)
    logits = logits_list[0] if len(logits_list) == 1 else nt.concat(list(logits_list), axis=0)
    targets = np.concatenate([np.asarray(t, dtype=np.int64) for t in targets_list])
    return nt.cross_entropy_logits(logits, targets)


def msm_loss(token_logits: Sequence[Tensor], token_targets: Sequence[np.ndarray]) -> Tensor:
    """Masked-segment prediction loss over text positions."""
    return masked_token_loss(token_logits, token_targets)


def mrm_loss(region_logits: Sequence[Tensor], region_targets: Sequence[np.ndarray]) -> Tensor:
    """Masked-region classification loss over object positions."""
    return masked_token_loss(region_logits, region_targets)


def itm_loss(logits: Tensor, labels) -> Tensor:
    """Binary matching loss over a batch of (logit, 0/1 label) pairs."""
    return nt.binary_cross_entropy_logits(logits, np.asarray(labels, dtype=np.float64))


def total_loss(msm: Tensor, mrm: Tensor, itm: Tensor,
               weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum of the three components; gradients flow through all."""
    w1, w2, w3 = weights
    return nt.add(nt.add(nt.mul(msm, w1), nt.mul(mrm, w2)), nt.mul(itm, w3))
