"""Run configuration: typed sections, TOML/JSON loading, strict keys.

Unknown keys are rejected rather than ignored so a typo cannot silently
run a different experiment. The seed is mandatory; there are no
unseeded runs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..elastic import ElasticSchedule
from ..errors import ConfigInvalid
from ..model import ModelConfig

try:
    import tomllib
except ModuleNotFoundError:             # python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class DataConfig:
    text_sequences: int = 256
    text_len: int = 32
    text_modes: int = 4
    vision_sequences: int = 0
    vision_frames: int = 1
    vision_grids: tuple[tuple[int, int], ...] = ((1, 1), (2, 2), (4, 4))
    vision_flip_prob: float = 0.1
    vision_window: int | None = None
    audio_sequences: int = 0
    audio_frames: int = 16
    audio_feature_dim: int = 8
    eval_fraction: float = 0.25

    def __post_init__(self):
        for name in ("text_sequences", "vision_sequences", "audio_sequences"):
            if getattr(self, name) < 0:
                raise ConfigInvalid(f"{name} must be non-negative")
        for name in ("text_len", "text_modes", "vision_frames",
                     "audio_frames", "audio_feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must be positive")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigInvalid(
                f"eval_fraction must lie in (0, 1), got {self.eval_fraction}")
        if not 0.0 <= self.vision_flip_prob <= 1.0:
            raise ConfigInvalid("vision_flip_prob must lie in [0, 1]")
        grids = tuple(tuple(int(x) for x in g) for g in self.vision_grids)
        object.__setattr__(self, "vision_grids", grids)

    @property
    def modalities(self) -> tuple[str, ...]:
        out = []
        if self.text_sequences:
            out.append("text")
        if self.vision_sequences:
            out.append("vision")
        if self.audio_sequences:
            out.append("audio")
        return tuple(out)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    warmup_steps: int = 50
    peak_lr: float = 3e-3
    batch_start: int = 8
    batch_end: int = 8
    batch_ramp_steps: int = 0
    decay_fraction: float = 0.0
    rescale_losses: bool = True
    ema_decay: float = 0.99

    def __post_init__(self):
        for name in ("steps", "batch_start", "batch_end"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must be positive")
        if self.warmup_steps < 0 or self.batch_ramp_steps < 0:
            raise ConfigInvalid("schedule step counts must be non-negative")
        if self.peak_lr <= 0:
            raise ConfigInvalid(f"peak_lr must be positive, got {self.peak_lr}")
        if not 0.0 <= self.decay_fraction <= 1.0:
            raise ConfigInvalid(
                f"decay_fraction must lie in [0, 1], got {self.decay_fraction}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigInvalid(f"ema_decay must lie in [0, 1), got {self.ema_decay}")


@dataclass(frozen=True)
class RlSimConfig:
    queries: int = 12
    group_size: int = 4
    base_length: int = 40
    length_jitter: int = 10
    tail_length: int = 400
    tail_index: int = 5
    train_batch: int = 4
    buffer_factor: int = 2

    def __post_init__(self):
        for name in ("queries", "group_size", "base_length",
                     "tail_length", "train_batch", "buffer_factor"):
            if getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must be positive")
        if self.length_jitter < 0:
            raise ConfigInvalid("length_jitter must be non-negative")
        if not 0 <= self.tail_index < self.queries:
            raise ConfigInvalid(
                f"tail_index {self.tail_index} outside [0, {self.queries})")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out_dir: str = "run_out"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    elastic: ElasticSchedule | None = None
    rl: RlSimConfig = field(default_factory=RlSimConfig)

    def __post_init__(self):
        if int(self.seed) != self.seed:
            raise ConfigInvalid(f"seed must be an integer, got {self.seed!r}")
        if self.elastic is not None:
            self.elastic.validate_against(self.model)

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        return json.dumps(payload, sort_keys=True, indent=2, default=list) + "\n"


_SECTIONS = {"model": ModelConfig, "data": DataConfig,
             "train": TrainConfig, "elastic": ElasticSchedule,
             "rl": RlSimConfig}
_TUPLE_KEYS = {"depth_options", "width_options", "sparsity_options"}


def _build_section(cls, section, name: str):
    if not isinstance(section, dict):
        raise ConfigInvalid(f"[{name}] must be a table/object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigInvalid(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    values = {k: (tuple(v) if k in _TUPLE_KEYS and isinstance(v, list) else v)
              for k, v in section.items()}
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigInvalid(f"bad [{name}] section: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigInvalid("config root must be a table/object")
    allowed = {"seed", "out_dir"} | set(_SECTIONS)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigInvalid(f"unknown top-level key(s): {', '.join(unknown)}")
    if "seed" not in raw:
        raise ConfigInvalid("seed is mandatory; unseeded runs are not allowed")
    kwargs = {"seed": raw["seed"]}
    if "out_dir" in raw:
        kwargs["out_dir"] = raw["out_dir"]
    for name, cls in _SECTIONS.items():
        if raw.get(name) is not None:        # null means "not configured"
            kwargs[name] = _build_section(cls, raw[name], name)
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"invalid JSON in {path}: {exc}") from exc
    else:
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigInvalid(f"invalid TOML in {path}: {exc}") from exc
    return config_from_dict(raw)
