"""Train the full-precision toy model with Adam and cross entropy."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import tensor as T
from .data import ToyDataset
from .model import ViTModel, forward, predict
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainReport:
    train_top1: float
    test_top1: Optional[float]
    losses: List[float] = field(default_factory=list)
    initial_loss: float = float("nan")


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float(np.mean(np.argmax(logits, axis=-1) == labels))


def train_toy(
    model: ViTModel,
    dataset: ToyDataset,
    epochs: int = 12,
    lr: float = 2e-3,
    seed: int = 0,
    batch_size: int = 64,
    test_set: Optional[ToyDataset] = None,
    weight_decay: float = 0.0,
) -> TrainReport:
    """Minimize cross entropy in place on ``model``; deterministic given ``seed``.

    The learning rate follows a cosine decay over all steps.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    C = model.config.num_classes
    if dataset.labels.min() < 0 or dataset.labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")

    rng = np.random.default_rng(seed)
    names = list(model.params)
    params = [model.params[n] for n in names]
    state = AdamState.like([p.data for p in params])
    n = len(dataset)
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    report = TrainReport(train_top1=0.0, test_top1=None)

    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * batch_size:(s + 1) * batch_size]
            model.requires_grad_(True)
            with T.Tape() as tape:
                logits = forward(dataset.images[idx], model).logits
                loss = T.mean(T.cross_entropy(logits, dataset.labels[idx]))
            tape.backward(loss)
            if step == 0:
                report.initial_loss = loss.item()
            report.losses.append(loss.item())
            step_lr = lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
            grads = [p.grad for p in params]
            if weight_decay:
                for p in params:
                    if p.ndim == 2:
                        p.data *= 1.0 - step_lr * weight_decay
            adam_step([p.data for p in params], grads, state, step_lr)
            step += 1
        log.info("epoch %d loss %.4f", epoch, float(np.mean(report.losses[-steps_per_epoch:])))
    model.requires_grad_(False)

    report.train_top1 = top1(predict(model, dataset.images), dataset.labels)
    if test_set is not None:
        report.test_top1 = top1(predict(model, test_set.images), test_set.labels)
    return report
