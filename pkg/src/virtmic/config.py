"""Pipeline configuration: nested dataclasses read from JSON."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .arraysim import ArrayGeometry, SceneTemplate
from .net import VmeHyperparams
from .signal import StftConfig
from .train import TrainConfig

# eval scenes draw seeds from [EVAL_SEED_BASE, TRAIN_SEED_BASE), train scenes above
EVAL_SEED_BASE = 0
TRAIN_SEED_BASE = 1_000_000


class ConfigError(ValueError):
    pass


@dataclass
class GeometryConfig:
    dx: float = 0.10
    dz: float = 0.19
    mic_positions: list = None
    channel_ids: list = None

    def build(self) -> ArrayGeometry:
        if self.mic_positions is not None:
            return ArrayGeometry(self.mic_positions, self.channel_ids)
        return ArrayGeometry.tablet(self.dx, self.dz)


@dataclass
class ScenesConfig:
    train_count: int = 200
    eval_count: int = 50
    input_ids: list = field(default_factory=lambda: [4, 6])
    target_ids: list = field(default_factory=lambda: [5])
    template: SceneTemplate = field(default_factory=SceneTemplate)

    def __post_init__(self):
        if self.train_count < 0 or self.eval_count < 0:
            raise ConfigError("scene counts must be non-negative")
        if self.eval_count > TRAIN_SEED_BASE - EVAL_SEED_BASE:
            raise ConfigError("eval_count exceeds the eval seed range")
        if set(self.input_ids) & set(self.target_ids):
            raise ConfigError("input_ids and target_ids overlap")


@dataclass
class NetworkConfig:
    preset: str = "desk"
    N: int = None
    L: int = None
    B: int = None
    H: int = None
    P: int = None
    X: int = None
    R: int = None

    def build(self, c_in: int, c_out: int) -> VmeHyperparams:
        if self.preset not in ("desk", "full"):
            raise ConfigError(f"unknown network preset {self.preset!r}")
        base = getattr(VmeHyperparams, self.preset)(c_in, c_out)
        overrides = {k: v for k, v in dataclasses.asdict(self).items()
                     if k != "preset" and v is not None}
        return dataclasses.replace(base, **overrides)


@dataclass
class BeamformerLayout:
    label: str
    real: list
    virtual: list = field(default_factory=list)
    epsilon: float = None
    reference: int = None


def _default_layouts():
    return [
        BeamformerLayout("RM BF", [4, 6]),
        BeamformerLayout("RM BF", [4, 5, 6]),
        BeamformerLayout("VM BF", [4, 6], [5]),
    ]


@dataclass
class BeamformerConfig:
    window_ms: float = 64.0
    hop_ms: float = 16.0
    window_kind: str = "blackman"
    epsilon: float = 0.05
    reference: int = None
    mask_floor: float = 1e-6
    layouts: list = field(default_factory=_default_layouts)

    def stft_config(self, sample_rate: int) -> StftConfig:
        return StftConfig.from_duration(sample_rate, self.window_ms, self.hop_ms, self.window_kind)


@dataclass
class EvaluationConfig:
    filter_taps: int = 512


@dataclass
class PipelineConfig:
    seed: int
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    scenes: ScenesConfig = field(default_factory=ScenesConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    beamformer: BeamformerConfig = field(default_factory=BeamformerConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def __post_init__(self):
        # the top-level seed drives initialisation and the training schedule
        self.training = dataclasses.replace(self.training, seed=self.seed)

    def hyperparams(self) -> VmeHyperparams:
        return self.network.build(len(self.scenes.input_ids), len(self.scenes.target_ids))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


_NESTED = {
    PipelineConfig: {"geometry": GeometryConfig, "scenes": ScenesConfig, "network": NetworkConfig,
                     "training": TrainConfig, "beamformer": BeamformerConfig,
                     "evaluation": EvaluationConfig},
    ScenesConfig: {"template": SceneTemplate},
}


def _build(cls, data, path="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(cls, {}).get(key)
        if sub is not None:
            value = _build(sub, value, f"{path}.{key}")
        elif cls is BeamformerConfig and key == "layouts":
            value = [_build(BeamformerLayout, v, f"{path}.layouts[{i}]") for i, v in enumerate(value)]
        elif isinstance(value, list) and key.endswith(("_db", "_deg", "distance")):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def from_dict(data: dict, seed: int | None = None) -> PipelineConfig:
    data = dict(data)
    if seed is not None:
        data["seed"] = seed
    if "seed" not in data:
        raise ConfigError("config: 'seed' is mandatory")
    if isinstance(data.get("training"), dict) and "seed" in data["training"]:
        raise ConfigError("config.training: 'seed' is set by the top-level seed")
    return _build(PipelineConfig, data)


def load_config(path=None, seed: int | None = None) -> PipelineConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    return from_dict(data, seed)
