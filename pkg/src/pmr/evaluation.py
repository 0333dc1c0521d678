"""Proposal recall metrics and caption diversity metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataio import VideoAnnotation, tokenize

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


def tiou(a, b) -> float:
    a0, a1 = float(a[0]), float(a[1])
    b0, b1 = float(b[0]), float(b[1])
    if not (a1 > a0 and b1 > b0):
        raise ValueError(f"degenerate interval in tiou: {a}, {b}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    return inter / (max(a1, b1) - min(a0, b0)) if inter > 0 else 0.0


def tiou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise tIoU between interval arrays (n, 2) and (m, 2)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(
        np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None
    )
    union = np.maximum(a[:, None, 1], b[None, :, 1]) - np.minimum(a[:, None, 0], b[None, :, 0])
    return np.where(inter > 0, inter / union, 0.0)


@dataclass
class MetricReport:
    ar_at: dict[int, float] = field(default_factory=dict)
    auc_percent: float = float("nan")
    per_threshold_recall: np.ndarray | None = None  # thresholds x AN
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    div2: float = float("nan")
    r4: float = float("nan")

    def ar(self, an: int) -> float:
        return self.ar_at[an]


def ar_at_an(
    proposals: Mapping[str, Sequence],
    annotations: Sequence[VideoAnnotation],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    an_max: int = 100,
) -> MetricReport:
    """Average recall over tIoU thresholds for AN = 1..an_max proposals per video.

    ``proposals`` maps video id to intervals ``(t_start, t_end, ...)`` already
    sorted by score descending. Recall pools ground-truth actions over videos.
    """
    by_id = {a.video_id: a for a in annotations}
    missing = [v for v in proposals if v not in by_id]
    if missing:
        raise KeyError(f"proposals for unknown videos: {missing[:5]}")
    th = np.asarray(thresholds, dtype=np.float64)
    hits = np.zeros((len(th), an_max), dtype=np.int64)
    total = 0
    for ann in annotations:
        gt = np.asarray(ann.actions, dtype=np.float64).reshape(-1, 2)
        total += len(gt)
        props = proposals.get(ann.video_id, [])
        if len(gt) == 0 or len(props) == 0:
            continue
        iv = np.asarray([(p[0], p[1]) for p in props[:an_max]], dtype=np.float64)
        best = np.maximum.accumulate(tiou_matrix(gt, iv), axis=1)  # gt x rank
        if best.shape[1] < an_max:
            best = np.pad(best, ((0, 0), (0, an_max - best.shape[1])), mode="edge")
        hits += (best[None, :, :] >= th[:, None, None]).sum(axis=1)
    recall = hits / total if total else np.zeros_like(hits, dtype=np.float64)
    ar = recall.mean(axis=0)
    ans = np.arange(1, an_max + 1)
    auc = float(np.trapezoid(ar, ans) / (an_max - 1) * 100.0) if an_max > 1 else float(ar[0] * 100.0)
    return MetricReport(
        ar_at={int(k): float(v) for k, v in zip(ans, ar)},
        auc_percent=auc,
        per_threshold_recall=recall,
        thresholds=tuple(float(t) for t in th),
    )


def _as_tokens(paragraph) -> list[str]:
    if isinstance(paragraph, str):
        return tokenize(paragraph)
    out: list[str] = []
    for sentence in paragraph:
        out.extend(tokenize(sentence) if isinstance(sentence, str) else [str(t).casefold() for t in sentence])
    return out


def _ngrams(tokens: list[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def _per_video(paragraphs, n: int, fn) -> float:
    if isinstance(paragraphs, str):
        paragraphs = [paragraphs]
    values = []
    for p in paragraphs:
        grams = _ngrams(_as_tokens(p), n)
        if grams:
            values.append(fn(grams))
    if not values:
        raise ValueError(f"no paragraph has {n} or more tokens")
    return float(np.mean(values))


def diversity_div_n(paragraphs, n: int = 2) -> float:
    """Distinct n-grams over total n-grams per paragraph, averaged over paragraphs.

    ``paragraphs`` holds one paragraph per video; a paragraph is a string or a
    list of sentences (strings or token lists). A bare string is one video.
    """
    return _per_video(paragraphs, n, lambda g: len(set(g)) / len(g))


def repetition_r_n(paragraphs, n: int = 4) -> float:
    """Fraction of n-gram positions whose n-gram appeared earlier in the paragraph."""

    def rep(grams):
        seen, repeats = set(), 0
        for g in grams:
            repeats += g in seen
            seen.add(g)
        return repeats / len(grams)

    return _per_video(paragraphs, n, rep)


def export_curve(report: MetricReport, curve_path, summary_path=None) -> None:
    with open(curve_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["an", "ar"])
        for an in sorted(report.ar_at):
            w.writerow([an, f"{report.ar_at[an]:.6f}"])
    if summary_path is not None:
        Path(summary_path).write_text(format_summary(report))


def format_summary(report: MetricReport) -> str:
    top = max(report.ar_at) if report.ar_at else 100
    return (
        f"AR@{top}={report.ar_at.get(top, float('nan')):.6f}\n"
        f"AUC={report.auc_percent:.6f}\n"
        f"Div@2={report.div2:.6f}\n"
        f"R@4={report.r4:.6f}\n"
    )


def read_curve(path) -> dict[int, float]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {int(r["an"]): float(r["ar"]) for r in rows}


def read_summary(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k] = float(v)
    return out
