"""Encoder + head as one trainable model, its objective, and inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .beholders import EncoderDims, VideoInputs, encode_inputs, init_encoder_params
from .bmn import HeadDims, LabelSet, ProposalSet, extract_proposals, head_forward, init_head_params
from .losses import LAMBDA_ACT, l_act, l_wb
from .numerics import ParamStore, Tensor


@dataclass(frozen=True)
class ModelDims:
    C: int
    F: int
    T: int
    d_model: int = 32
    hidden: int = 32
    K: int = 10
    P: int = 2

    @property
    def encoder(self) -> EncoderDims:
        return EncoderDims(C=self.C, F=self.F, d_model=self.d_model, K=self.K, P=self.P)

    @property
    def head(self) -> HeadDims:
        return HeadDims(T=self.T, d_model=self.d_model, hidden=self.hidden)


def init_model(dims: ModelDims, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_encoder_params(store, rng, dims.encoder)
    init_head_params(store, rng, dims.head)
    return store


def forward(store: ParamStore, videos: list[VideoInputs]) -> tuple[Tensor, Tensor, Tensor]:
    return head_forward(store, encode_inputs(store, videos))


def objective(store: ParamStore, videos: list[VideoInputs], labels: list[LabelSet], lam_act: float = LAMBDA_ACT) -> Tensor:
    """Mean over videos of start + end + actionness losses."""
    p_s, p_e, p_a = forward(store, videos)
    L_S = np.stack([lb.L_S for lb in labels])
    L_E = np.stack([lb.L_E for lb in labels])
    L_A = np.stack([lb.L_A for lb in labels])
    total = l_wb(p_s, L_S) + l_wb(p_e, L_E) + l_act(p_a, L_A, lam_act)
    return total * (1.0 / len(videos))


def predict(store: ParamStore, videos: list[VideoInputs]) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    p_s, p_e, p_a = forward(store, videos)
    return [(p_s.data[b], p_e.data[b], p_a.data[b]) for b in range(len(videos))]


def propose(
    store: ParamStore,
    videos: list[VideoInputs],
    durations: list[float],
    video_ids: list[str],
    max_per_video: int = 100,
    sigma: float = 0.5,
    score_floor: float = 1e-4,
    chunk: int = 16,
) -> list[ProposalSet]:
    out = []
    for start in range(0, len(videos), chunk):
        maps = predict(store, videos[start : start + chunk])
        for k, (ps, pe, pa) in enumerate(maps):
            j = start + k
            out.append(extract_proposals(ps, pe, pa, durations[j], max_per_video, video_ids[j], sigma, score_floor))
    return out
