"""Training loop, inference and per-frame evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import Sample, batches, collate
from .errors import NumericalError
from .metrics import EvalRow, evaluate_pair
from .model import NetConfig, SegNet

log = logging.getLogger(__name__)


@dataclass
class OptimConfig:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainResult:
    net: SegNet
    epoch_losses: List[float] = field(default_factory=list)


def train(samples: Sequence[Sample], config: NetConfig, seed: int, epochs: int, batch_size: int = 16,
          optim: Optional[OptimConfig] = None,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train a fresh network; ``seed`` drives both initialization and shuffling."""
    if not samples:
        raise ValueError("no training samples")
    optim = optim or OptimConfig()
    net = SegNet(config, seed=seed)
    params = net.parameters()
    state = T.AdamState(lr=optim.lr, beta1=optim.beta1, beta2=optim.beta2, eps=optim.eps)
    result = TrainResult(net)
    for epoch in range(epochs):
        total, count = 0.0, 0
        for step, batch in enumerate(batches(list(samples), config.variant, batch_size, seed, epoch)):
            # overflow surfaces below as a non-finite loss or gradient
            with np.errstate(over="ignore", invalid="ignore"):
                logits = net.forward(batch.frame, batch.cue, training=True)
                loss = T.softmax_cross_entropy(logits, batch.mask)
                value = loss.item()
                if not np.isfinite(value):
                    raise NumericalError(f"non-finite loss at epoch {epoch} step {step}")
                loss.backward()
            try:
                T.adam_step({n: p.data for n, p in params.items()}, {n: p.grad for n, p in params.items()}, state)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at epoch {epoch} step {step}") from None
            for p in params.values():
                p.grad = None
            total += value * len(batch)
            count += len(batch)
        mean = total / count
        result.epoch_losses.append(mean)
        log.debug("seed %d epoch %d loss %.5f", seed, epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return result


def predict(net: SegNet, samples: Sequence[Sample], batch_size: int = 16) -> List[np.ndarray]:
    masks = []
    for start in range(0, len(samples), batch_size):
        batch = collate(samples[start:start + batch_size])
        masks.extend(net.predict(batch.frame, batch.cue))
    return masks


def evaluate(net: SegNet, samples: Sequence[Sample], condition: str, seed: int, fold: int = 0,
             tolerance_px: Optional[int] = None, batch_size: int = 16) -> List[EvalRow]:
    preds = predict(net, samples, batch_size)
    return score(preds, samples, condition, net.config.variant, seed, fold, tolerance_px)


def score(preds, samples: Sequence[Sample], condition: str, variant: str, seed: int, fold: int = 0,
          tolerance_px: Optional[int] = None) -> List[EvalRow]:
    rows = []
    for pred, s in zip(preds, samples):
        f, j = evaluate_pair(pred, s.mask, tolerance_px)
        rows.append(EvalRow(condition, variant, seed, fold, s.meta.sequence, s.meta.t, f, j))
    return rows
