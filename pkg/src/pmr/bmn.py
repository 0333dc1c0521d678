"""Boundary-matching labels, a compact proposal head, and proposal post-processing.

Map convention: the duration map has shape (D, T) with D = T. Row ``d - 1``
holds proposals lasting ``d`` snippets; column ``i`` is the start snippet.
Cell (d, i) is the interval [i * delta, (i + d) * delta] seconds with
delta = duration / T, and is valid only when i + d <= T.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .dataio import VideoAnnotation
from .evaluation import tiou_matrix
from .numerics import (
    ParamStore,
    ShapeError,
    Tensor,
    add_attention,
    add_mlp,
    as_tensor,
    concat,
    init_uniform,
    matmul,
    mlp_forward,
    reshape,
    self_attention,
    sigmoid,
    take,
)

# --------------------------------------------------------------------------
# labels


@dataclass
class LabelSet:
    L_S: np.ndarray
    L_E: np.ndarray
    L_A: np.ndarray

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"L_S": self.L_S, "L_E": self.L_E, "L_A": self.L_A}

    @classmethod
    def from_arrays(cls, arrays) -> "LabelSet":
        return cls(*(arrays[k].astype(np.float64) for k in ("L_S", "L_E", "L_A")))


def snippet_centers(duration: float, T: int) -> np.ndarray:
    return (np.arange(T) + 0.5) * (duration / T)


def gen_boundary_labels(ann: VideoAnnotation, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Mark the snippet whose center is nearest each start (end) time."""
    centers = snippet_centers(ann.duration_s, T)
    L_S, L_E = np.zeros(T), np.zeros(T)
    for ts, te in ann.actions:
        L_S[np.argmin(np.abs(centers - ts))] = 1.0
        L_E[np.argmin(np.abs(centers - te))] = 1.0
    return L_S, L_E


def valid_mask(T: int) -> np.ndarray:
    d = np.arange(1, T + 1)[:, None]
    i = np.arange(T)[None, :]
    return (i + d) <= T


def cell_intervals(duration: float, T: int) -> np.ndarray:
    """(D, T, 2) start/end seconds of every cell; invalid cells included."""
    delta = duration / T
    d = np.arange(1, T + 1)[:, None]
    i = np.arange(T)[None, :]
    starts = np.broadcast_to(i * delta, (T, T))
    ends = (i + d) * delta
    return np.stack([starts, ends], axis=-1)


def gen_duration_labels(ann: VideoAnnotation, T: int) -> np.ndarray:
    """Cells whose tIoU with some action is a positive local maximum over valid 4-neighbors."""
    valid = valid_mask(T)
    cells = cell_intervals(ann.duration_s, T).reshape(-1, 2)
    out = np.zeros((T, T))
    for act in ann.actions:
        iou = tiou_matrix(cells, np.asarray([act]))[:, 0].reshape(T, T)
        surf = np.where(valid, iou, -np.inf)
        padded = np.pad(surf, 1, constant_values=-np.inf)
        neighbors = np.stack([padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]])
        peak = valid & (iou > 0) & np.all(surf >= neighbors, axis=0)
        out[peak] = 1.0
    return out


def make_labels(ann: VideoAnnotation, T: int) -> LabelSet:
    L_S, L_E = gen_boundary_labels(ann, T)
    return LabelSet(L_S, L_E, gen_duration_labels(ann, T))


# --------------------------------------------------------------------------
# head


@dataclass(frozen=True)
class HeadDims:
    T: int
    d_model: int = 32
    hidden: int = 32


def init_head_params(store: ParamStore, rng: np.random.Generator, dims: HeadDims) -> None:
    d = dims.d_model
    store.add("head.pos", init_uniform(rng, d, (dims.T, d)))
    add_attention(store, rng, "head.attn", d)
    add_mlp(store, rng, "head.boundary", [3 * d, dims.hidden, 2])
    add_mlp(store, rng, "head.proposal", [5 * d, dims.hidden, 1])


@lru_cache(maxsize=16)
def _cell_geometry(T: int):
    d_idx, i_idx = np.nonzero(valid_mask(T))
    d = d_idx + 1
    n = len(d)
    avg = np.zeros((n, T))
    for k in range(n):
        avg[k, i_idx[k] : i_idx[k] + d[k]] = 1.0 / d[k]
    # indices into the sequence padded with one zero row at each end
    gather = np.stack([i_idx + 1, i_idx + d, i_idx, i_idx + d + 1])  # first, last, before, after
    scatter = np.full(T * T, n)
    scatter[d_idx * T + i_idx] = np.arange(n)
    return avg, gather, scatter, n


def _pad_time(z: Tensor) -> Tensor:
    zeros = np.zeros(z.shape[:-2] + (1, z.shape[-1]))
    return concat([zeros, z, zeros], axis=-2)


def head_forward(store: ParamStore, features) -> tuple[Tensor, Tensor, Tensor]:
    """Boundary probabilities (…, T) twice and the actionness map (…, T, T).

    Snippet features get learned positional encodings, one residual
    self-attention layer, then two branches: a shared per-snippet MLP over
    each snippet and its neighbors for start/end, and a per-cell MLP over the
    mean of the covered snippets plus the first, last and just-outside
    snippets for actionness.
    """
    x = as_tensor(features)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    B, T, d = x.shape
    pos = store["head.pos"]
    if T < 2 or T > pos.shape[0]:
        raise ShapeError(f"head supports 2 <= T <= {pos.shape[0]}, got {T}")
    if d != pos.shape[1]:
        raise ShapeError(f"feature width {d} != d_model {pos.shape[1]}")
    if T != pos.shape[0]:
        pos = pos[:T]
    h = x + pos
    z = h + self_attention(store, "head.attn", h)
    zp = _pad_time(z)

    nb = concat([take(zp, np.arange(T) + k, axis=1) for k in range(3)], axis=-1)
    bound = sigmoid(mlp_forward(store, "head.boundary", nb))
    p_s, p_e = bound[..., 0], bound[..., 1]

    avg, gather, scatter, n = _cell_geometry(T)
    parts = [matmul(avg, z)] + [take(zp, g, axis=1) for g in gather]
    logits = mlp_forward(store, "head.proposal", concat(parts, axis=-1))
    probs = sigmoid(reshape(logits, (B, n)))
    probs = concat([probs, np.zeros((B, 1))], axis=-1)
    p_a = reshape(take(probs, scatter, axis=1), (B, T, T))
    if squeeze:
        return p_s[0], p_e[0], p_a[0]
    return p_s, p_e, p_a


# --------------------------------------------------------------------------
# proposals


@dataclass
class Proposal:
    t_start: float
    t_end: float
    p_start: float
    p_end: float
    p_action: float
    score: float

    def __iter__(self):
        return iter((self.t_start, self.t_end, self.score))

    def __getitem__(self, k):
        return (self.t_start, self.t_end, self.score)[k]


@dataclass
class ProposalSet:
    video_id: str
    proposals: list[Proposal] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.proposals)

    def intervals(self) -> np.ndarray:
        return np.array([(p.t_start, p.t_end) for p in self.proposals]).reshape(-1, 2)

    def scores(self) -> np.ndarray:
        return np.array([p.score for p in self.proposals])


def soft_nms(proposals: ProposalSet, sigma: float = 0.5, score_floor: float = 1e-4, max_keep: int | None = None) -> ProposalSet:
    """Gaussian soft-NMS. Output is in pick order, i.e. score descending."""
    items = list(proposals.proposals)
    if not items:
        return ProposalSet(proposals.video_id, [])
    iv = np.array([(p.t_start, p.t_end) for p in items])
    scores = np.array([p.score for p in items], dtype=np.float64)
    alive = scores >= score_floor
    kept: list[Proposal] = []
    while alive.any() and (max_keep is None or len(kept) < max_keep):
        cand = np.flatnonzero(alive)
        # highest score, then earliest start, then earliest end
        best = cand[np.lexsort((iv[cand, 1], iv[cand, 0], -scores[cand]))[0]]
        p = items[best]
        kept.append(Proposal(p.t_start, p.t_end, p.p_start, p.p_end, p.p_action, float(scores[best])))
        alive[best] = False
        rest = np.flatnonzero(alive)
        if rest.size:
            overlap = tiou_matrix(iv[best], iv[rest])[0]
            scores[rest] *= np.exp(-(overlap**2) / sigma)
            alive[rest] = scores[rest] >= score_floor
    return ProposalSet(proposals.video_id, kept)


def extract_proposals(
    p_s,
    p_e,
    p_a,
    duration: float,
    max_per_video: int = 100,
    video_id: str = "",
    sigma: float = 0.5,
    score_floor: float = 1e-4,
) -> ProposalSet:
    """Score every valid cell by P_S[start] * P_E[last] * P_A, then soft-NMS."""
    p_s, p_e, p_a = (np.asarray(as_tensor(a).data) for a in (p_s, p_e, p_a))
    T = p_s.shape[0]
    delta = duration / T
    d_idx, i_idx = np.nonzero(valid_mask(T))
    last = i_idx + d_idx  # i + d - 1
    score = p_s[i_idx] * p_e[last] * p_a[d_idx, i_idx]
    cands = [
        Proposal(i * delta, (i + dd + 1) * delta, float(p_s[i]), float(p_e[j]), float(p_a[dd, i]), float(sc))
        for dd, i, j, sc in zip(d_idx, i_idx, last, score)
        if sc >= score_floor
    ]
    return soft_nms(ProposalSet(video_id, cands), sigma, score_floor, max_keep=max_per_video)


def write_proposals(sets, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ps in sets:
            for p in ps.proposals:
                fh.write(json.dumps({
                    "video_id": ps.video_id,
                    "t_start_s": round(p.t_start, 6),
                    "t_end_s": round(p.t_end, 6),
                    "score": round(p.score, 8),
                }) + "\n")


def read_proposals(path) -> dict[str, list[tuple[float, float, float]]]:
    out: dict[str, list[tuple[float, float, float]]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            out.setdefault(obj["video_id"], []).append((obj["t_start_s"], obj["t_end_s"], obj["score"]))
    for v in out.values():
        v.sort(key=lambda p: -p[2])  # stable: file order breaks ties
    return out
