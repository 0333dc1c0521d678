"""The four snippet encoders and video-level encoding.

Non-trainable preprocessing (spatial pooling, RoIAlign, top-K word retrieval)
is separated from the trainable part so that training can reuse cached inputs:
:func:`prepare_video` turns raw bundles into :class:`VideoInputs`, and
:func:`encode_inputs` runs the projections, both AAMs and the AOE fusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aam import aam, aam_batched, add_aam_params
from .dataio import SnippetBundle, Vocabulary
from .numerics import (
    ParamStore,
    ShapeError,
    Tensor,
    add_attention,
    add_linear,
    as_tensor,
    cosine_similarity,
    linear,
    mean_pool_rows,
    reshape,
    self_attention,
    stack,
)


@dataclass(frozen=True)
class EncoderDims:
    C: int
    F: int  # text feature width of object candidates
    d_model: int = 32
    K: int = 10
    P: int = 2
    aam_hidden: int | None = None


def environment_beholder(env_map) -> np.ndarray:
    env_map = np.asarray(env_map, dtype=np.float64)
    if env_map.ndim != 3 or min(env_map.shape[1:]) < 1:
        raise ShapeError(f"env_map must be C x H x W with H, W >= 1, got {env_map.shape}")
    return env_map.mean(axis=(1, 2))


def _bilinear(env_map: np.ndarray, x: float, y: float) -> np.ndarray:
    """Sample at continuous (x, y) where pixel (u, v) has its center at (u + 0.5, v + 0.5)."""
    _, H, W = env_map.shape
    fx = min(max(x - 0.5, 0.0), W - 1.0)
    fy = min(max(y - 0.5, 0.0), H - 1.0)
    x0, y0 = int(np.floor(fx)), int(np.floor(fy))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    ax, ay = fx - x0, fy - y0
    top = (1 - ax) * env_map[:, y0, x0] + ax * env_map[:, y0, x1]
    bottom = (1 - ax) * env_map[:, y1, x0] + ax * env_map[:, y1, x1]
    return (1 - ay) * top + ay * bottom


def roi_align_bins(env_map, box, P: int = 2) -> np.ndarray:
    """C x P x P RoIAlign of a normalized box, one sample at each bin center."""
    env_map = np.asarray(env_map, dtype=np.float64)
    _, H, W = env_map.shape
    x1, y1, x2, y2 = (float(b) for b in box)
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"degenerate box {box}")
    bw, bh = (x2 - x1) * W / P, (y2 - y1) * H / P
    out = np.empty((env_map.shape[0], P, P))
    for r in range(P):
        for c in range(P):
            out[:, r, c] = _bilinear(env_map, x1 * W + (c + 0.5) * bw, y1 * H + (r + 0.5) * bh)
    return out


def roi_align(env_map, box, P: int = 2) -> np.ndarray:
    """RoIAlign followed by a mean over bins: one length-C vector per box."""
    return roi_align_bins(env_map, box, P).mean(axis=(1, 2))


def top_k_words(frame_embed, vocab: Vocabulary, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and cosine similarities of the K most similar words (lower index wins ties)."""
    if not 1 <= K <= len(vocab):
        raise ValueError(f"K={K} must be in [1, {len(vocab)}]")
    frame_embed = np.asarray(frame_embed, dtype=np.float64).reshape(-1)
    if not np.any(frame_embed):
        raise ValueError("zero-norm frame embedding")
    sims = cosine_similarity(frame_embed, vocab.embeddings)[0]
    order = np.lexsort((np.arange(len(sims)), -sims))[:K]
    return order, sims[order]


# --------------------------------------------------------------------------
# parameters


def init_encoder_params(store: ParamStore, rng: np.random.Generator, dims: EncoderDims) -> None:
    d = dims.d_model
    add_linear(store, rng, "env.proj", dims.C, d)
    add_linear(store, rng, "act.proj", dims.C, d)
    add_aam_params(store, rng, "act.aam", d, dims.aam_hidden)
    store.add("act.none", rng.normal(scale=0.1, size=(1, d)))
    add_linear(store, rng, "obj.proj", dims.F, d)
    add_aam_params(store, rng, "obj.aam", d, dims.aam_hidden)
    add_attention(store, rng, "aoe.attn", d)


# --------------------------------------------------------------------------
# per-snippet path


@dataclass
class SnippetFeature:
    f_env: Tensor
    f_act: Tensor
    f_obj: Tensor
    fused: Tensor
    actor_ids: list[int] = field(default_factory=list)
    word_ids: list[int] = field(default_factory=list)


def project_env(store: ParamStore, f_env) -> Tensor:
    return linear(store, "env.proj", reshape(as_tensor(f_env), (1, -1)))[0]


def actors_beholder(store: ParamStore, bundle: SnippetBundle, f_env_proj, P: int = 2) -> tuple[Tensor, list[int]]:
    if len(bundle.actor_boxes) == 0:
        return store["act.none"][0], []
    feats = np.stack([roi_align(bundle.env_map, b, P) for b in bundle.actor_boxes])
    ent = linear(store, "act.proj", feats)
    out = aam(store, "act.aam", ent, f_env_proj)
    return out.fused, out.selected


def objects_beholder(store: ParamStore, frame_embed, vocab: Vocabulary, K: int, f_env_proj) -> tuple[Tensor, list[int]]:
    idx, _ = top_k_words(frame_embed, vocab, K)
    ent = linear(store, "obj.proj", vocab.text_features[idx])
    out = aam(store, "obj.aam", ent, f_env_proj)
    return out.fused, [int(idx[i]) for i in out.selected]


def aoe_beholder(store: ParamStore, f_act, f_obj, f_env_proj) -> Tensor:
    tokens = stack([f_act, f_obj, f_env_proj], axis=0)
    if tokens.shape[-1] != store["aoe.attn.q"].shape[0]:
        raise ShapeError("aoe inputs must all have width d_model")
    return mean_pool_rows(self_attention(store, "aoe.attn", tokens))


def encode_snippet(store: ParamStore, bundle: SnippetBundle, vocab: Vocabulary, dims: EncoderDims) -> SnippetFeature:
    f_env = project_env(store, environment_beholder(bundle.env_map))
    f_act, actor_ids = actors_beholder(store, bundle, f_env, dims.P)
    f_obj, word_ids = objects_beholder(store, bundle.frame_embed, vocab, dims.K, f_env)
    return SnippetFeature(f_env, f_act, f_obj, aoe_beholder(store, f_act, f_obj, f_env), actor_ids, word_ids)


def encode_video(store: ParamStore, bundles, vocab: Vocabulary, dims: EncoderDims) -> np.ndarray:
    """T x d_model snippet features, one snippet at a time."""
    if len(bundles) < 1:
        raise ValueError("encode_video needs at least one snippet")
    return np.stack([encode_snippet(store, b, vocab, dims).fused.data for b in bundles])


# --------------------------------------------------------------------------
# cached inputs and the batched trainable path


@dataclass
class VideoInputs:
    """Parameter-free per-snippet inputs for one video."""

    env: np.ndarray  # T x C pooled environment
    actors: np.ndarray  # T x M x C RoI features, zero padded
    actor_mask: np.ndarray  # T x M, 1 where a box exists
    objects: np.ndarray  # T x K x F candidate text features
    object_ids: np.ndarray  # T x K vocabulary indices

    @property
    def T(self) -> int:
        return self.env.shape[0]

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "env": self.env,
            "actors": self.actors,
            "actor_mask": self.actor_mask,
            "objects": self.objects,
            "object_ids": self.object_ids,
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "VideoInputs":
        return cls(
            arrays["env"].astype(np.float64),
            arrays["actors"].astype(np.float64),
            arrays["actor_mask"].astype(np.float64),
            arrays["objects"].astype(np.float64),
            arrays["object_ids"].astype(np.int64),
        )


def prepare_video(bundles, vocab: Vocabulary, dims: EncoderDims, max_actors: int | None = None) -> VideoInputs:
    T = len(bundles)
    n_max = max([len(b.actor_boxes) for b in bundles] + [1])
    M = max(n_max, max_actors or 1)
    env = np.stack([environment_beholder(b.env_map) for b in bundles])
    actors = np.zeros((T, M, env.shape[1]))
    mask = np.zeros((T, M))
    objects = np.zeros((T, dims.K, vocab.text_features.shape[1]))
    ids = np.zeros((T, dims.K), dtype=np.int64)
    for t, b in enumerate(bundles):
        for j, box in enumerate(b.actor_boxes):
            actors[t, j] = roi_align(b.env_map, box, dims.P)
            mask[t, j] = 1.0
        idx, _ = top_k_words(b.frame_embed, vocab, dims.K)
        ids[t] = idx
        objects[t] = vocab.text_features[idx]
    return VideoInputs(env, actors, mask, objects, ids)


def _pad_actors(videos: list[VideoInputs]) -> tuple[np.ndarray, np.ndarray]:
    M = max(v.actors.shape[1] for v in videos)
    acts, masks = [], []
    for v in videos:
        pad = M - v.actors.shape[1]
        acts.append(np.pad(v.actors, ((0, 0), (0, pad), (0, 0))))
        masks.append(np.pad(v.actor_mask, ((0, 0), (0, pad))))
    return np.concatenate(acts), np.concatenate(masks)


def encode_inputs(store: ParamStore, videos: list[VideoInputs]) -> Tensor:
    """Batched encoder: list of B videos with equal T -> (B, T, d_model)."""
    B, T = len(videos), videos[0].T
    if any(v.T != T for v in videos):
        raise ShapeError("all videos in a batch must have the same snippet count")
    env = np.concatenate([v.env for v in videos])
    actors, amask = _pad_actors(videos)
    objects = np.concatenate([v.objects for v in videos])

    f_env = linear(store, "env.proj", env)
    act_ent = linear(store, "act.proj", actors)
    f_act, _, _ = aam_batched(store, "act.aam", act_ent, f_env, amask)
    has_actor = (amask.sum(axis=1) > 0).astype(np.float64)[:, None]
    f_act = f_act * has_actor + store["act.none"] * (1.0 - has_actor)

    obj_ent = linear(store, "obj.proj", objects)
    f_obj, _, _ = aam_batched(store, "obj.aam", obj_ent, f_env, np.ones(objects.shape[:2]))

    tokens = stack([f_act, f_obj, f_env], axis=1)
    fused = mean_pool_rows(self_attention(store, "aoe.attn", tokens))
    return reshape(fused, (B, T, -1))
