"""Mini-batch Adam training of the full model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .beholders import VideoInputs
from .bmn import LabelSet
from .losses import LAMBDA_ACT
from .model import objective
from .numerics import NumericError, ParamStore, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    initial_full_loss: float = float("nan")
    final_full_loss: float = float("nan")


def full_loss(store: ParamStore, videos, labels, lam_act: float = LAMBDA_ACT, chunk: int = 16) -> float:
    """Objective averaged over every video, evaluated in chunks."""
    total = 0.0
    for s in range(0, len(videos), chunk):
        part = objective(store, videos[s : s + chunk], labels[s : s + chunk], lam_act)
        total += part.item() * len(videos[s : s + chunk])
    return total / len(videos)


def train(
    store: ParamStore,
    videos: list[VideoInputs],
    labels: list[LabelSet],
    iterations: int,
    batch_size: int = 8,
    lr: float = 1e-4,
    seed: int = 1,
    lam_act: float = LAMBDA_ACT,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run ``iterations`` Adam steps over seeded reshuffled mini-batches."""
    rng = np.random.default_rng(seed)
    n = len(videos)
    batch_size = min(batch_size, n)
    result = TrainResult(initial_full_loss=full_loss(store, videos, labels, lam_act))
    order = rng.permutation(n)
    cursor = 0
    for it in range(1, iterations + 1):
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + batch_size]
        cursor += batch_size
        store.zero_grad()
        loss = objective(store, [videos[i] for i in idx], [labels[i] for i in idx], lam_act)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at iteration {it}")
        loss.backward()
        adam_step(store, store.grads(), lr=lr)
        result.losses.append(loss.item())
        if on_step is not None:
            on_step(it, loss.item())
        if it % 50 == 0:
            log.info("iteration %d loss %.5f", it, loss.item())
    store.zero_grad()
    result.final_full_loss = full_loss(store, videos, labels, lam_act)
    return result
