"""Central-difference verification of the reverse-mode gradients.

The checker is deliberately independent of the tape: it only re-evaluates
the loss function at perturbed parameter values and compares the slope
against whatever ``backward`` produced.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParameterSet
from .tensor import Tensor, backward


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: ParameterSet,
    step: float = 1e-5,
    sample_count: int = 200,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` must be pure and deterministic given the current parameter
    values. A random sample of coordinates is perturbed by +-``step``; the
    relative error of each is |a - d| / max(|a|, |d|, 1e-8). Parameter
    values are restored exactly before returning.
    """
    params.zero_grad()
    backward(loss_fn(), params)
    analytic = {name: np.array(p.grad, copy=True) for name, p in params.items()}

    names = params.names()
    sizes = [params[n].values.size for n in names]
    offsets = np.cumsum([0] + sizes)
    total = int(offsets[-1])

    rng = np.random.default_rng(seed)
    k = min(sample_count, total)
    coords = np.sort(rng.choice(total, size=k, replace=False))

    worst = 0.0
    for coord in coords:
        slot = int(np.searchsorted(offsets, coord, side="right") - 1)
        name = names[slot]
        flat_index = int(coord - offsets[slot])
        tensor = params[name]
        original = tensor.values.flat[flat_index]

        tensor.values.flat[flat_index] = original + step
        loss_plus = loss_fn().item()
        tensor.values.flat[flat_index] = original - step
        loss_minus = loss_fn().item()
        tensor.values.flat[flat_index] = original

        estimate = (loss_plus - loss_minus) / (2.0 * step)
        exact = float(analytic[name].flat[flat_index])
        err = abs(exact - estimate) / max(abs(exact), abs(estimate), 1e-8)
        worst = max(worst, err)
    return worst
