"""On-disk formats and the synthetic desk-scale dataset.

PMRF tensor container (all integers u32 little-endian)::

    b"PMRF" | version=1 | blob_count
    per blob: name_len | name (utf-8) | rank | dim_0 .. dim_{rank-1} | f32 LE data (row-major)

Annotations are JSON lines. A vocabulary file is a text header (word count, then
one word per line) followed directly by a PMRF container with an
``embeddings`` blob (D x E) and optionally a ``text_features`` blob (D x F).
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"PMRF"
VERSION = 1
_U32 = struct.Struct("<I")
_U32_MAX = 2**32 - 1


class ContainerError(ValueError):
    """Base class for PMRF read failures."""


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class SizeMismatchError(ContainerError):
    """The file holds more bytes than its header declares."""


class AnnotationError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class TensorBlob:
    name: str
    shape: tuple[int, ...]
    data: np.ndarray  # float32, flat or shaped; stored row-major

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if not self.shape or any(s < 1 for s in self.shape):
            raise ValueError(f"blob {self.name!r}: shape must be non-empty with dims >= 1, got {self.shape}")
        if math.prod(self.shape) != self.data.size:
            raise ValueError(f"blob {self.name!r}: shape {self.shape} does not match {self.data.size} values")

    @classmethod
    def from_array(cls, name: str, array) -> "TensorBlob":
        a = np.asarray(array)
        return cls(name, a.shape if a.ndim else (1,), a)

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)


def _pack_blobs(blobs: Sequence[TensorBlob]) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_U32.pack(VERSION))
    out.write(_U32.pack(len(blobs)))
    for blob in blobs:
        name = blob.name.encode("utf-8")
        if len(name) > _U32_MAX or len(blob.shape) > _U32_MAX or any(s > _U32_MAX for s in blob.shape):
            raise OverflowError(f"blob {blob.name!r} does not fit u32 header fields")
        out.write(_U32.pack(len(name)))
        out.write(name)
        out.write(_U32.pack(len(blob.shape)))
        for s in blob.shape:
            out.write(_U32.pack(s))
        out.write(blob.data.astype("<f4", copy=False).tobytes())
    return out.getvalue()


def _unpack_blobs(buf: bytes) -> list[TensorBlob]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedError(f"need {n} bytes at offset {pos}, file has {len(buf)}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    def u32() -> int:
        return _U32.unpack(take(4))[0]

    if len(buf) < 4:
        raise TruncatedError("file shorter than magic")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    pos = 4
    version = u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported container version {version}")
    count = u32()
    blobs = []
    for _ in range(count):
        name = take(u32()).decode("utf-8")
        rank = u32()
        shape = tuple(u32() for _ in range(rank))
        n = math.prod(shape)
        data = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32)
        blobs.append(TensorBlob(name, shape, data))
    if pos != len(buf):
        raise SizeMismatchError(f"{len(buf) - pos} trailing bytes after declared payload")
    return blobs


def write_tensor_container(blobs: Sequence[TensorBlob], path) -> None:
    payload = _pack_blobs(blobs)
    Path(path).write_bytes(payload)


def read_tensor_container(path) -> list[TensorBlob]:
    return _unpack_blobs(Path(path).read_bytes())


def blobs_to_dict(blobs: Iterable[TensorBlob]) -> dict[str, np.ndarray]:
    return {b.name: b.array() for b in blobs}


def write_arrays(arrays: dict[str, np.ndarray], path) -> None:
    """Write named arrays in insertion order."""
    write_tensor_container([TensorBlob.from_array(k, v) for k, v in arrays.items()], path)


def read_arrays(path) -> dict[str, np.ndarray]:
    return blobs_to_dict(read_tensor_container(path))


# --------------------------------------------------------------------------
# annotations


@dataclass
class VideoAnnotation:
    video_id: str
    duration_s: float
    actions: list[tuple[float, float]]
    captions: list[list[str]] | None = None

    def validate(self) -> None:
        if not self.video_id:
            raise AnnotationError("empty video_id")
        if not (self.duration_s > 0 and math.isfinite(self.duration_s)):
            raise AnnotationError(f"{self.video_id}: duration_s must be > 0")
        for ts, te in self.actions:
            if not (0 <= ts < te <= self.duration_s):
                raise AnnotationError(
                    f"{self.video_id}: action [{ts}, {te}] violates 0 <= start < end <= {self.duration_s}"
                )

    def to_json(self) -> dict:
        out = {
            "video_id": self.video_id,
            "duration_s": self.duration_s,
            "actions": [[ts, te] for ts, te in self.actions],
        }
        if self.captions is not None:
            out["captions"] = [" ".join(c) for c in self.captions]
        return out


def tokenize(text: str) -> list[str]:
    """Whitespace tokens, case-folded."""
    return text.casefold().split()


def parse_annotation(obj: dict, line: int | None = None) -> VideoAnnotation:
    try:
        vid = obj["video_id"]
        duration = float(obj["duration_s"])
        actions = [(float(a[0]), float(a[1])) for a in obj["actions"]]
        if any(len(a) != 2 for a in obj["actions"]):
            raise ValueError("each action needs exactly [start, end]")
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise AnnotationError(f"malformed annotation: {exc}", line) from None
    if not isinstance(vid, str):
        raise AnnotationError("video_id must be a string", line)
    captions = obj.get("captions")
    if captions is not None:
        captions = [c.split() if isinstance(c, str) else [str(t) for t in c] for c in captions]
    ann = VideoAnnotation(vid, duration, actions, captions)
    try:
        ann.validate()
    except AnnotationError as exc:
        raise AnnotationError(str(exc), line) from None
    return ann


def read_annotations(path) -> list[VideoAnnotation]:
    out: list[VideoAnnotation] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(obj, dict):
                raise AnnotationError("expected a JSON object", lineno)
            ann = parse_annotation(obj, lineno)
            if ann.video_id in seen:
                raise AnnotationError(f"duplicate video_id {ann.video_id!r}", lineno)
            seen.add(ann.video_id)
            out.append(ann)
    return out


def write_annotations(annotations: Sequence[VideoAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann.to_json()) + "\n")


# --------------------------------------------------------------------------
# vocabulary and snippets


@dataclass
class Vocabulary:
    words: list[str]
    embeddings: np.ndarray  # D x E, the space used for similarity ranking
    text_features: np.ndarray | None = None  # D x F, candidate features; defaults to embeddings

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or len(self.words) != self.embeddings.shape[0]:
            raise ValueError("vocabulary needs one embedding row per word")
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        if np.any(np.linalg.norm(self.embeddings, axis=1) == 0):
            raise ValueError("vocabulary embedding rows must have nonzero norm")
        if self.text_features is None:
            self.text_features = self.embeddings
        self.text_features = np.asarray(self.text_features, dtype=np.float64)
        if self.text_features.shape[0] != len(self.words):
            raise ValueError("text_features needs one row per word")

    def __len__(self) -> int:
        return len(self.words)


def write_vocabulary(vocab: Vocabulary, path) -> None:
    for w in vocab.words:
        if not w or any(ch.isspace() for ch in w):
            raise ValueError(f"vocabulary word {w!r} must be a non-empty token without whitespace")
    header = f"{len(vocab.words)}\n" + "".join(w + "\n" for w in vocab.words)
    arrays = {"embeddings": vocab.embeddings}
    if vocab.text_features is not vocab.embeddings:
        arrays["text_features"] = vocab.text_features
    payload = _pack_blobs([TensorBlob.from_array(k, v) for k, v in arrays.items()])
    Path(path).write_bytes(header.encode("utf-8") + payload)


def read_vocabulary(path) -> Vocabulary:
    buf = Path(path).read_bytes()
    nl = buf.index(b"\n")
    count = int(buf[:nl])
    pos = nl + 1
    words = []
    for _ in range(count):
        end = buf.index(b"\n", pos)
        words.append(buf[pos:end].decode("utf-8"))
        pos = end + 1
    arrays = blobs_to_dict(_unpack_blobs(buf[pos:]))
    # float32 storage; widen once here
    return Vocabulary(words, arrays["embeddings"].astype(np.float64),
                      arrays.get("text_features", arrays["embeddings"]).astype(np.float64))


@dataclass
class SnippetBundle:
    env_map: np.ndarray  # C x H x W
    actor_boxes: np.ndarray  # N_B x 4, normalized (x1, y1, x2, y2)
    frame_embed: np.ndarray  # E

    def __post_init__(self):
        self.env_map = np.asarray(self.env_map, dtype=np.float64)
        boxes = np.asarray(self.actor_boxes, dtype=np.float64)
        self.actor_boxes = boxes.reshape(-1, 4)
        self.frame_embed = np.asarray(self.frame_embed, dtype=np.float64).reshape(-1)
        if self.env_map.ndim != 3:
            raise ValueError("env_map must be C x H x W")
        b = self.actor_boxes
        if b.size and not (
            np.all((0 <= b[:, 0]) & (b[:, 0] < b[:, 2]) & (b[:, 2] <= 1))
            and np.all((0 <= b[:, 1]) & (b[:, 1] < b[:, 3]) & (b[:, 3] <= 1))
        ):
            raise ValueError("actor boxes must satisfy 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1")


def write_video_bundles(bundles: Sequence[SnippetBundle], path) -> None:
    arrays = {
        "env_maps": np.stack([b.env_map for b in bundles]),
        "frame_embed": np.stack([b.frame_embed for b in bundles]),
    }
    for t, b in enumerate(bundles):
        if len(b.actor_boxes):
            arrays[f"boxes.{t:05d}"] = b.actor_boxes
    write_arrays(arrays, path)


def read_video_bundles(path) -> list[SnippetBundle]:
    arrays = read_arrays(path)
    env, emb = arrays["env_maps"], arrays["frame_embed"]
    return [
        SnippetBundle(env[t], arrays.get(f"boxes.{t:05d}", np.zeros((0, 4))), emb[t])
        for t in range(env.shape[0])
    ]


def snippet_count(n_frames: int, frames_per_snippet: int) -> int:
    """Number of snippets covering ``n_frames`` frames, last one possibly partial."""
    if n_frames < 1 or frames_per_snippet < 1:
        raise ValueError("frame counts must be >= 1")
    return -(-n_frames // frames_per_snippet)


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSignal:
    """Strength of the planted action signal. Outside actions everything is N(0, 1) noise."""

    n_classes: int = 4
    words_per_class: int = 3
    env_shift: float = 1.0
    actor_gain: float = 2.5
    embed_noise: float = 0.3
    max_distractors: int = 2
    snippet_seconds: tuple[float, float] = (0.5, 2.0)
    boundary_jitter: tuple[float, float] = (0.05, 0.25)


@dataclass
class SyntheticDataset:
    videos: list[list[SnippetBundle]]
    annotations: list[VideoAnnotation]
    vocab: Vocabulary
    classes: list[list[int]] = field(default_factory=list)  # action class per GT action


def _random_box(rng: np.random.Generator, min_size: float = 0.2, max_size: float = 0.6) -> np.ndarray:
    w, h = rng.uniform(min_size, max_size, size=2)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _box_pixels(box: np.ndarray, H: int, W: int) -> tuple[slice, slice]:
    x1, y1, x2, y2 = box
    c0, c1 = int(np.floor(x1 * W)), max(int(np.ceil(x2 * W)), int(np.floor(x1 * W)) + 1)
    r0, r1 = int(np.floor(y1 * H)), max(int(np.ceil(y2 * H)), int(np.floor(y1 * H)) + 1)
    return slice(r0, min(r1, H)), slice(c0, min(c1, W))


def _place_actions(rng: np.random.Generator, T: int) -> list[tuple[int, int]]:
    """Non-overlapping snippet spans [i0, i1) with 3 <= i1 - i0 <= T // 2 and a gap between them."""
    max_len = T // 2
    if max_len < 3:
        raise ValueError("T too small for a 3-snippet action")
    want = int(rng.integers(1, 4))
    for n in range(want, 0, -1):
        for _ in range(50):
            lengths = rng.integers(3, max_len + 1, size=n)
            slack = T - int(lengths.sum()) - (n - 1)
            if slack < 0:
                continue
            # distribute slack across n + 1 gaps
            cuts = np.sort(rng.integers(0, slack + 1, size=n))
            gaps = np.diff(np.concatenate([[0], cuts, [slack]]))
            spans, pos = [], 0
            for k in range(n):
                pos += int(gaps[k]) + (1 if k else 0)
                spans.append((pos, pos + int(lengths[k])))
                pos += int(lengths[k])
            return spans
    raise RuntimeError("could not place an action")  # unreachable for T >= 6


def generate_synthetic(
    seed: int,
    n_videos: int,
    T: int,
    C: int,
    H: int,
    W: int,
    E: int,
    vocab_size: int,
    signal: SyntheticSignal | None = None,
    text_width: int | None = None,
) -> SyntheticDataset:
    """Deterministic toy dataset with learnable action structure.

    Inside an action of class c: the environment map is shifted along a
    class direction, one extra "main actor" box covers a region carrying a
    class pattern, and the frame embedding sits near the class's fixed words.
    """
    if min(n_videos, C, H, W, E, vocab_size) < 1 or T < 4:
        raise ValueError("counts must be >= 1 and T >= 4")
    if T < 6:
        raise ValueError("T must be >= 6 to host a 3-snippet action")
    sig = signal or SyntheticSignal()
    F = text_width or E
    rng = np.random.default_rng(seed)

    text_feats = rng.normal(size=(vocab_size, F))
    proj = rng.normal(size=(F, E)) / math.sqrt(F)
    embeds = text_feats @ proj
    words = [f"obj{i:04d}" for i in range(vocab_size)]
    vocab = Vocabulary(words, embeds, text_feats)

    env_dirs = rng.normal(size=(sig.n_classes, C))
    env_dirs /= np.linalg.norm(env_dirs, axis=1, keepdims=True)
    actor_dirs = rng.normal(size=(sig.n_classes, C))
    actor_dirs /= np.linalg.norm(actor_dirs, axis=1, keepdims=True)
    class_words = [
        [(c * sig.words_per_class + k) % vocab_size for k in range(sig.words_per_class)]
        for c in range(sig.n_classes)
    ]
    unit_embeds = embeds / np.linalg.norm(embeds, axis=1, keepdims=True)

    videos, annotations, classes = [], [], []
    for v in range(n_videos):
        delta = float(rng.uniform(*sig.snippet_seconds))
        duration = T * delta
        spans = _place_actions(rng, T)
        labels = [int(rng.integers(sig.n_classes)) for _ in spans]
        snippet_class = np.full(T, -1)
        actions = []
        for (i0, i1), c in zip(spans, labels):
            snippet_class[i0:i1] = c
            u, w = rng.uniform(*sig.boundary_jitter, size=2)
            actions.append(((i0 + u) * delta, (i1 - w) * delta))

        bundles = []
        for t in range(T):
            env = rng.normal(size=(C, H, W))
            boxes = [_random_box(rng) for _ in range(int(rng.integers(0, sig.max_distractors + 1)))]
            emb = rng.normal(size=E)
            c = snippet_class[t]
            if c >= 0:
                env += sig.env_shift * env_dirs[c][:, None, None]
                main = _random_box(rng, 0.3, 0.6)
                rows, cols = _box_pixels(main, H, W)
                env[:, rows, cols] += sig.actor_gain * actor_dirs[c][:, None, None]
                boxes.insert(int(rng.integers(len(boxes) + 1)), main)
                target = unit_embeds[class_words[c]].mean(axis=0)
                emb = target / np.linalg.norm(target) + sig.embed_noise * emb / math.sqrt(E)
            bundles.append(SnippetBundle(env, np.array(boxes).reshape(-1, 4), emb))

        captions = None
        if actions:
            captions = []
            for c in labels:
                ws = [words[i] for i in class_words[c]]
                captions.append(["a", "person", "uses", ws[0], "with", ws[-1], "near", ws[len(ws) // 2]])
        videos.append(bundles)
        annotations.append(VideoAnnotation(f"vid{v:04d}", duration, actions, captions))
        classes.append(labels)
    return SyntheticDataset(videos, annotations, vocab, classes)


def filter_vocabulary(counts: dict[str, int], min_count: int = 6) -> list[str]:
    """Drop words seen fewer than ``min_count`` times, keeping first-seen order."""
    return [w for w, n in counts.items() if n >= min_count]


def write_dataset(ds: SyntheticDataset, root) -> None:
    root = Path(root)
    (root / "videos").mkdir(parents=True, exist_ok=True)
    write_annotations(ds.annotations, root / "annotations.jsonl")
    write_vocabulary(ds.vocab, root / "vocab.pmrv")
    for ann, bundles in zip(ds.annotations, ds.videos):
        write_video_bundles(bundles, root / "videos" / f"{ann.video_id}.pmrf")


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
