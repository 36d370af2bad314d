"""Supervised source pretraining with cross-entropy."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .adapt import evaluate
from .errors import NumericError
from .network import Model
from .optim import SGD, ParamGroup
from .shiftgen import LabeledBatch
from .tensor import Tensor, backward, log_softmax, mul, tsum

logger = logging.getLogger(__name__)


@dataclass
class PretrainResult:
    losses: List[float] = field(default_factory=list)
    train_error: float = math.nan


def cross_entropy(logits: Tensor, y: np.ndarray) -> Tensor:
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0 / n
    return -tsum(mul(log_softmax(logits), Tensor(onehot)))


def pretrain(
    model: Model,
    data: LabeledBatch,
    epochs: int = 200,
    lr: float = 1e-2,
    momentum: float = 0.9,
    batch_size: int = 64,
    seed: int = 0,
) -> PretrainResult:
    """Train dense weights and normalisation affine parameters in place.

    Activation parameters stay frozen at their identity initialisation.
    Batch norm runs on batch statistics and refreshes its running
    statistics. Raises :class:`NumericError` if the loss diverges.
    """
    model.freeze()
    params = [t for _, g, t in model.named_parameters() if g in ("weights", "affine")]
    for t in params:
        t.requires_grad = True
    opt = SGD([ParamGroup(params, lr, "source")], momentum=momentum)
    rng = np.random.default_rng([seed, 404])
    n = len(data)
    bs = min(batch_size, n)
    result = PretrainResult()
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        # drop a trailing batch of one: batch norm cannot estimate its variance
        starts = [s for s in range(0, n, bs) if n - s >= 2]
        for s in starts:
            idx = order[s : s + bs]
            logits = model.forward(data.x[idx], train_mode=True, update_stats=True)
            loss = cross_entropy(logits, data.y[idx])
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(f"pretraining diverged at epoch {epoch}: loss={val}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += val * len(idx)
        result.losses.append(total / n)
        if epoch % 50 == 0 or epoch == epochs - 1:
            logger.info("epoch %d loss %.5f", epoch, result.losses[-1])
    model.freeze()
    result.train_error = evaluate(model, data.x, data.y)[1]
    return result
