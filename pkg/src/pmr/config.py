"""Run configuration: dataclasses loaded from a flat dotted-key YAML file.

Example file::

    dims.d_model: 32
    train.iterations: 500
    paths.out: runs/desk
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataio import SyntheticSignal
from .evaluation import DEFAULT_THRESHOLDS


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class PathsConfig:
    out: str = "runs/desk"
    dataset: str | None = None  # defaults to <out>/dataset
    vocab: str | None = None  # defaults to <dataset>/vocab.pmrv
    params: str | None = None  # defaults to <out>/train/params.pmrf
    captions: str | None = None  # optional JSONL {video_id, paragraph} for Div@2 / R@4


@dataclass
class DataConfig:
    n_videos: int = 50
    vocab_size: int = 64
    frames_per_snippet: int = 16
    n_classes: int = 4
    words_per_class: int = 3
    env_shift: float = 1.0
    actor_gain: float = 2.5
    embed_noise: float = 0.3
    max_distractors: int = 2

    def signal(self) -> SyntheticSignal:
        return SyntheticSignal(
            n_classes=self.n_classes,
            words_per_class=self.words_per_class,
            env_shift=self.env_shift,
            actor_gain=self.actor_gain,
            embed_noise=self.embed_noise,
            max_distractors=self.max_distractors,
        )


@dataclass
class DimsConfig:
    d_model: int = 32
    hidden: int = 32
    C: int = 8
    H: int = 6
    W: int = 6
    E: int = 16
    T: int = 32
    K: int = 10
    P: int = 2


@dataclass
class TrainConfig:
    seed: int = 1
    lr: float = 1e-4
    lambda_act: float = 10.0
    lambda_cap: float = 0.1
    batch_size: int = 8
    iterations: int = 500
    holdout: int = 10  # last N videos are held out from training


@dataclass
class EvalConfig:
    thresholds: list[float] = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    an_max: int = 100
    sigma_nms: float = 0.5
    score_floor: float = 1e-4
    split: str = "holdout"  # or "all"
    dump_maps: bool = False


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    dims: DimsConfig = field(default_factory=DimsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    # resolved locations
    @property
    def out(self) -> Path:
        return Path(self.paths.out)

    @property
    def dataset_dir(self) -> Path:
        return Path(self.paths.dataset) if self.paths.dataset else self.out / "dataset"

    @property
    def vocab_path(self) -> Path:
        return Path(self.paths.vocab) if self.paths.vocab else self.dataset_dir / "vocab.pmrv"

    @property
    def params_path(self) -> Path:
        return Path(self.paths.params) if self.paths.params else self.out / "train" / "params.pmrf"

    def set(self, key: str, value) -> None:
        section, _, name = key.partition(".")
        sub = getattr(self, section, None) if name else None
        if sub is None or not dataclasses.is_dataclass(sub) or name not in {f.name for f in dataclasses.fields(sub)}:
            raise ConfigError(key, "unknown configuration key")
        current = getattr(sub, name)
        setattr(sub, name, _coerce(key, value, current, sub, name))

    def validate(self) -> None:
        for f in dataclasses.fields(self.dims):
            if getattr(self.dims, f.name) < 1:
                raise ConfigError(f"dims.{f.name}", "must be >= 1")
        if self.dims.T < 6:
            raise ConfigError("dims.T", "must be >= 6")
        if self.dims.K > self.data.vocab_size:
            raise ConfigError("dims.K", "must not exceed data.vocab_size")
        for name in ("n_videos", "vocab_size", "frames_per_snippet", "n_classes", "words_per_class"):
            if getattr(self.data, name) < 1:
                raise ConfigError(f"data.{name}", "must be >= 1")
        for name in ("lambda_act", "lambda_cap"):
            if getattr(self.train, name) < 0:
                raise ConfigError(f"train.{name}", "must be >= 0")
        if self.train.lr <= 0:
            raise ConfigError("train.lr", "must be > 0")
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if self.train.iterations < 0:
            raise ConfigError("train.iterations", "must be >= 0")
        if not 0 <= self.train.holdout < self.data.n_videos:
            raise ConfigError("train.holdout", "must be in [0, data.n_videos)")
        if self.eval.an_max < 1:
            raise ConfigError("eval.an_max", "must be >= 1")
        if self.eval.sigma_nms <= 0:
            raise ConfigError("eval.sigma_nms", "must be > 0")
        if self.eval.split not in ("holdout", "all"):
            raise ConfigError("eval.split", "must be 'holdout' or 'all'")
        if not self.eval.thresholds or any(not 0 < t <= 1 for t in self.eval.thresholds):
            raise ConfigError("eval.thresholds", "must be a non-empty list in (0, 1]")


def _coerce(key: str, value, current, sub, name):
    hint = {f.name: f.type for f in dataclasses.fields(sub)}[name]
    if isinstance(value, str) and not (isinstance(current, str) or "str" in str(hint)):
        value = yaml.safe_load(value)
    try:
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(current, int):
            if isinstance(value, bool) or int(value) != value:
                raise TypeError
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, list):
            return [float(v) for v in value]
        return None if value is None else str(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"bad value {value!r}") from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (``path`` or $PMR_CONFIG), then ``overrides``."""
    cfg = RunConfig()
    path = path or os.environ.get("PMR_CONFIG")
    if path:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError("--config", f"file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"unparseable: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("--config", "expected a mapping of dotted keys")
        for k, v in raw.items():
            cfg.set(str(k), v)
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    flat = {}
    for section in dataclasses.fields(cfg):
        sub = getattr(cfg, section.name)
        for f in dataclasses.fields(sub):
            flat[f"{section.name}.{f.name}"] = getattr(sub, f.name)
    return yaml.safe_dump(flat, sort_keys=False)
