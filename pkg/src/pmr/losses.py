"""Training objectives.

All losses are returned as quantities to minimize. The weighted binary term
is the negated class-balanced log-likelihood.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bmn import valid_mask
from .numerics import Tensor, as_tensor, clip, log, take, tsum

log_ = logging.getLogger(__name__)

P_CLAMP = 1e-7
CAPTION_CLAMP = 1e-9
LAMBDA_ACT = 10.0
LAMBDA_CAP = 0.1

# number of reference-token probabilities that had to be clamped up
caption_clamp_events = 0


def l_wb(P, L, mask=None) -> Tensor:
    """Class-balanced binary cross-entropy over the last axis.

    Positives are averaged over N+ and negatives over N-; a class with no
    members contributes nothing. Leading axes are independent samples whose
    losses are summed.
    """
    P = as_tensor(P)
    L = np.asarray(L, dtype=np.float64)
    if P.shape != L.shape:
        raise ValueError(f"prediction shape {P.shape} != label shape {L.shape}")
    m = np.ones_like(L) if mask is None else np.broadcast_to(np.asarray(mask, dtype=np.float64), L.shape)
    pos = L * m
    neg = (1.0 - L) * m
    n_pos = pos.sum(axis=-1, keepdims=True)
    n_neg = neg.sum(axis=-1, keepdims=True)
    w_pos = np.divide(pos, n_pos, out=np.zeros_like(pos), where=n_pos > 0)
    w_neg = np.divide(neg, n_neg, out=np.zeros_like(neg), where=n_neg > 0)
    pc = clip(P, P_CLAMP, 1.0 - P_CLAMP)
    return -tsum(log(pc) * w_pos + log(1.0 - pc) * w_neg)


def l_act(P_A, L_A, lam: float = LAMBDA_ACT, mask=None) -> Tensor:
    """l_wb plus ``lam`` times the mean squared error, both over valid cells.

    ``mask`` defaults to the valid upper triangle of a square duration map.
    A leading batch axis is summed over.
    """
    P_A = as_tensor(P_A)
    L_A = np.asarray(L_A, dtype=np.float64)
    if mask is None:
        mask = valid_mask(P_A.shape[-1])
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), L_A.shape)
    flat = (-1, L_A.shape[-2] * L_A.shape[-1])
    Pf = P_A.reshape(P_A.shape[:-2] + flat[1:])
    Lf, mf = L_A.reshape(L_A.shape[:-2] + flat[1:]), m.reshape(m.shape[:-2] + flat[1:])
    count = mf.sum(axis=-1)
    diff = (Pf - Lf) * mf
    mse = tsum(tsum(diff * diff, axis=-1) / count)
    return l_wb(Pf, Lf, mf) + lam * mse


@dataclass
class CaptionBatch:
    token_ids: np.ndarray  # n
    step_distributions: Tensor  # n x V, rows sum to 1

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids, dtype=np.intp)
        self.step_distributions = as_tensor(self.step_distributions)
        dist = self.step_distributions.data
        if dist.ndim != 2 or dist.shape[0] != len(self.token_ids):
            raise ValueError("need one distribution row per token")
        if np.any(self.token_ids < 0) or np.any(self.token_ids >= dist.shape[1]):
            raise ValueError("token id outside the vocabulary")
        if np.any(dist < 0) or not np.allclose(dist.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("each step distribution must be nonnegative and sum to 1")


def _reference_probs(batch: CaptionBatch) -> Tensor:
    n = len(batch.token_ids)
    flat = batch.step_distributions.reshape(-1)
    return take(flat, np.arange(n) * batch.step_distributions.shape[1] + batch.token_ids, axis=0)


def repetition_penalty(batch: CaptionBatch) -> Tensor:
    """Mean over steps of -sum log(1 - p(c)) for tokens c already in the prefix."""
    ids = batch.token_ids
    n, V = batch.step_distributions.shape
    rows, cols = [], []
    for i in range(1, n):
        for c in sorted(set(ids[:i].tolist())):
            rows.append(i)
            cols.append(c)
    if not rows:
        return Tensor(0.0)
    p = take(batch.step_distributions.reshape(-1), np.asarray(rows) * V + np.asarray(cols), axis=0)
    return -tsum(log(1.0 - clip(p, 0.0, 1.0 - CAPTION_CLAMP))) * (1.0 / n)


def caption_loss(batch: CaptionBatch, lam: float = LAMBDA_CAP) -> Tensor:
    """Mean reference-token NLL plus ``lam`` times the repetition penalty."""
    global caption_clamp_events
    p = _reference_probs(batch)
    low = int(np.sum(p.data < CAPTION_CLAMP))
    if low:
        caption_clamp_events += low
        log_.warning("caption_loss: clamped %d reference probabilities to %g", low, CAPTION_CLAMP)
    nll = -tsum(log(clip(p, CAPTION_CLAMP, 1.0))) * (1.0 / len(batch.token_ids))
    if lam == 0:
        return nll
    return nll + lam * repetition_penalty(batch)
