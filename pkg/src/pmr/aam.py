"""Adaptive attention over a variable set of entities (actors or object words).

Each entity is scored against the environment by the norm of the sum of two
MLP embeddings, the scores are softmaxed, and entities whose weight is strictly
above the uniform level 1/M survive. Survivors are fused by self-attention
followed by a mean over tokens.

The hard selection carries no gradient: during training the survivor mask is
a constant and gradients reach only the fusion path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ParamStore,
    ShapeError,
    Tensor,
    add_attention,
    add_mlp,
    as_tensor,
    l2_norm,
    mean_pool_rows,
    mlp_forward,
    self_attention,
)


@dataclass
class AamOutcome:
    scores: np.ndarray
    selected: list[int]
    fused: Tensor
    fallback: bool = False


def raw_scores(store: ParamStore, prefix: str, entities, env, mask=None) -> np.ndarray:
    """Unnormalized scores h (..., M); masked-out entities get -inf."""
    ent = mlp_forward(store, f"{prefix}.ent", as_tensor(entities).data)
    env_hat = mlp_forward(store, f"{prefix}.env", as_tensor(env).data)
    h = l2_norm(ent.data + env_hat.data[..., None, :]).data
    if mask is not None:
        h = np.where(np.asarray(mask, dtype=bool), h, -np.inf)
    return h


def normalize_scores(h: np.ndarray) -> np.ndarray:
    """Softmax over the entity axis, ignoring -inf (absent) entries."""
    h = np.asarray(h, dtype=np.float64)
    finite = np.isfinite(h)
    top = np.max(np.where(finite, h, -np.inf), axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(finite, np.exp(np.where(finite, h, 0.0) - top), 0.0)
    total = e.sum(axis=-1, keepdims=True)
    return e / np.where(total > 0, total, 1.0)


def select_mask(H: np.ndarray, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Survivor mask and per-row fallback flags.

    The threshold is 1/M with M the number of present entities in the row.
    Rows with no present entity select nothing and do not count as fallback.
    """
    H = np.asarray(H, dtype=np.float64)
    present = np.ones(H.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = present.sum(axis=-1, keepdims=True)
    tau = 1.0 / np.maximum(count, 1)
    keep = present & (H > tau)
    empty = ~keep.any(axis=-1) & (count[..., 0] > 0)
    if np.any(empty):
        masked = np.where(present, H, -np.inf)
        best = np.argmax(masked, axis=-1)  # first maximum wins ties
        if H.ndim == 1:
            keep[best] = True
        else:
            rows = np.nonzero(empty)
            keep[rows + (best[rows],)] = True
    return keep, empty


def aam_scores(store: ParamStore, prefix: str, entity_feats, env_feat) -> np.ndarray:
    """Normalized scores H (length M) for one entity set."""
    ent = np.atleast_2d(as_tensor(entity_feats).data)
    if ent.shape[0] < 1:
        raise ShapeError("aam_scores needs at least one entity")
    return normalize_scores(raw_scores(store, prefix, ent, np.asarray(as_tensor(env_feat).data)))


def aam_select(H) -> tuple[list[int], bool]:
    """Indices with H_i > 1/M, or the lowest-index argmax if that set is empty."""
    keep, fallback = select_mask(np.asarray(H, dtype=np.float64))
    return [int(i) for i in np.flatnonzero(keep)], bool(fallback)


def aam_fuse(store: ParamStore, prefix: str, entity_feats, selected) -> Tensor:
    """Self-attention over the selected rows, then mean over tokens."""
    if len(selected) == 0:
        raise ValueError("aam_fuse needs a non-empty selection")
    x = as_tensor(entity_feats)
    rows = x[np.asarray(selected, dtype=np.intp)]
    return mean_pool_rows(self_attention(store, f"{prefix}.attn", rows))


def aam(store: ParamStore, prefix: str, entity_feats, env_feat) -> AamOutcome:
    H = aam_scores(store, prefix, entity_feats, env_feat)
    selected, fallback = aam_select(H)
    return AamOutcome(H, selected, aam_fuse(store, prefix, entity_feats, selected), fallback)


def aam_batched(store: ParamStore, prefix: str, entities: Tensor, env: Tensor, present) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Batched AAM over (S, M, d) entity sets with a presence mask (S, M).

    Returns fused (S, d), the survivor mask, and the normalized scores. Rows
    with no present entity produce an arbitrary finite vector that callers
    must replace.
    """
    present = np.asarray(present, dtype=bool)
    H = normalize_scores(raw_scores(store, prefix, entities, env, present))
    keep, _ = select_mask(H, present)
    # give empty rows one visible token so the softmax stays finite
    safe = keep.copy()
    safe[~keep.any(axis=-1), 0] = True
    attended = self_attention(store, f"{prefix}.attn", entities, key_mask=safe)
    return mean_pool_rows(attended, safe), keep, H


def add_aam_params(store: ParamStore, rng: np.random.Generator, prefix: str, d: int, hidden: int | None = None) -> None:
    hidden = d if hidden is None else hidden
    add_mlp(store, rng, f"{prefix}.env", [d, hidden, d])
    add_mlp(store, rng, f"{prefix}.ent", [d, hidden, d])
    add_attention(store, rng, f"{prefix}.attn", d)

