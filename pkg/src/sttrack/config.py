"""Run configuration: a single JSON file validated strictly before any work.

Unknown keys are rejected with the offending path in the message so typos
never silently fall back to defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .autodiff import AdamWConfig
from .core import ClassId
from .kalman import KfParams
from .metrics import INF, MatchingPolicy
from .model import SttConfig
from .runtime import LifecycleConfig
from .sim import NoiseModel, SpeedThresholds


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class PopulationConfig:
    static: int = 6
    slow: int = 7
    fast: int = 7

    def __post_init__(self) -> None:
        if min(self.static, self.slow, self.fast) < 0:
            raise ConfigError("population counts must be >= 0")
        if self.static + self.slow + self.fast < 1:
            raise ConfigError("population must contain at least one object")


@dataclass(frozen=True, slots=True)
class SimSection:
    frames: int = 200
    dt: float = 0.1
    field_size: float = 60.0
    appearance_dim: int = 16
    population: PopulationConfig = field(default_factory=PopulationConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    speed_thresholds: SpeedThresholds = field(default_factory=SpeedThresholds)


@dataclass(frozen=True, slots=True)
class TrainSection:
    steps: int = 2000
    batch_size: int = 64
    log_every: int = 50
    learning_rate: float = 1e-4
    weight_decay: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    warmup_steps: int = 100
    final_lr_fraction: float = 0.5
    max_examples: int = 40000
    train_scenarios: int = 24

    def optimizer(self) -> AdamWConfig:
        return AdamWConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            warmup_steps=self.warmup_steps,
            total_steps=self.steps,
            final_lr_fraction=self.final_lr_fraction,
        )


@dataclass(frozen=True, slots=True)
class RunConfig:
    class_id: ClassId = ClassId.VEHICLE
    seed: int = 0
    backend: str = "kalman"
    out_dir: str | None = None
    sim: SimSection = field(default_factory=SimSection)
    stt: SttConfig = field(default_factory=SttConfig)
    train: TrainSection = field(default_factory=TrainSection)
    kf: KfParams = field(default_factory=KfParams)
    lifecycle: LifecycleConfig = field(default_factory=LifecycleConfig)
    policy: MatchingPolicy = field(default_factory=MatchingPolicy)

    def __post_init__(self) -> None:
        if self.backend not in ("kalman", "stt"):
            raise ConfigError(f"backend must be 'kalman' or 'stt', got {self.backend!r}")
        if self.sim.appearance_dim != self.stt.d_a:
            raise ConfigError(
                f"sim.appearance_dim ({self.sim.appearance_dim}) must equal "
                f"stt.d_a ({self.stt.d_a})"
            )

    def tracking_lifecycle(self) -> LifecycleConfig:
        """Lifecycle with history bound to the model's track length for stt."""
        if self.backend == "stt":
            return LifecycleConfig(
                creation_score_threshold=self.lifecycle.creation_score_threshold,
                max_misses=self.lifecycle.max_misses,
                min_confidence=self.lifecycle.min_confidence,
                max_history=self.stt.t_max,
            )
        return self.lifecycle


def _check_keys(data: dict, allowed: set[str], context: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in {context}: {', '.join(sorted(unknown))}"
        )


def _build(cls, data: dict, context: str, converters: dict | None = None):
    import dataclasses

    fields = {f.name: f for f in dataclasses.fields(cls)}
    _check_keys(data, set(fields), context)
    kwargs = {}
    for key, value in data.items():
        if converters and key in converters:
            value = converters[key](value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid {context}: {exc}") from exc


def _class_map(data: dict, context: str, inner=float) -> dict:
    out = {}
    for key, value in data.items():
        try:
            cls = ClassId(key)
        except ValueError:
            raise ConfigError(f"unknown class in {context}: {key!r}") from None
        out[cls] = inner(value) if inner is not dict else dict(value)
    return out


def _state_thresholds(data: dict, context: str) -> dict:
    out = {}
    for key, per_state in data.items():
        try:
            cls = ClassId(key)
        except ValueError:
            raise ConfigError(f"unknown class in {context}: {key!r}") from None
        _check_keys(per_state, {"velocity", "acceleration"}, f"{context}.{key}")
        out[cls] = {
            s: (INF if v in ("inf", None) else float(v)) for s, v in per_state.items()
        }
    return out


def _policy_from_dict(data: dict) -> MatchingPolicy:
    allowed = {
        "iou_threshold",
        "state_thresholds",
        "alpha_s",
        "persistence",
        "speed_thresholds",
    }
    _check_keys(data, allowed, "policy")
    kwargs = {}
    if "iou_threshold" in data:
        kwargs["iou_threshold"] = _class_map(data["iou_threshold"], "policy.iou_threshold")
    if "state_thresholds" in data:
        kwargs["state_thresholds"] = _state_thresholds(
            data["state_thresholds"], "policy.state_thresholds"
        )
    if "alpha_s" in data and data["alpha_s"] is not None:
        kwargs["alpha_s"] = _state_thresholds(data["alpha_s"], "policy.alpha_s")
    if "persistence" in data:
        kwargs["persistence"] = bool(data["persistence"])
    if "speed_thresholds" in data:
        kwargs["speed_thresholds"] = _build(
            SpeedThresholds, data["speed_thresholds"], "policy.speed_thresholds"
        )
    try:
        return MatchingPolicy(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid policy: {exc}") from exc


def run_config_from_dict(data: dict) -> RunConfig:
    allowed = {
        "class_id",
        "seed",
        "backend",
        "out_dir",
        "sim",
        "stt",
        "train",
        "kf",
        "lifecycle",
        "policy",
    }
    _check_keys(data, allowed, "config")
    kwargs: dict = {}
    if "class_id" in data:
        try:
            kwargs["class_id"] = ClassId(data["class_id"])
        except ValueError:
            raise ConfigError(f"unknown class_id: {data['class_id']!r}") from None
    for key in ("seed", "backend", "out_dir"):
        if key in data:
            kwargs[key] = data[key]
    if "sim" in data:
        sim_data = dict(data["sim"])
        converters = {
            "population": lambda d: _build(PopulationConfig, d, "sim.population"),
            "noise": lambda d: _build(NoiseModel, d, "sim.noise"),
            "speed_thresholds": lambda d: _build(
                SpeedThresholds, d, "sim.speed_thresholds"
            ),
        }
        kwargs["sim"] = _build(SimSection, sim_data, "sim", converters)
    if "stt" in data:
        kwargs["stt"] = _build(SttConfig, data["stt"], "stt")
    if "train" in data:
        kwargs["train"] = _build(TrainSection, data["train"], "train")
    if "kf" in data:
        kwargs["kf"] = _build(KfParams, data["kf"], "kf")
    if "lifecycle" in data:
        kwargs["lifecycle"] = _build(LifecycleConfig, data["lifecycle"], "lifecycle")
    if "policy" in data:
        kwargs["policy"] = _policy_from_dict(data["policy"])
    try:
        return RunConfig(**kwargs)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid config: {exc}") from exc


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such config file: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return run_config_from_dict(data)


def resolved_dict(cfg: RunConfig) -> dict:
    """Full resolved configuration for provenance headers."""
    import dataclasses

    def plain(obj):
        if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, ClassId):
            return obj.value
        if isinstance(obj, dict):
            return {
                (k.value if isinstance(k, ClassId) else k): plain(v)
                for k, v in obj.items()
            }
        if isinstance(obj, float) and obj == INF:
            return "inf"
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj

    out = plain(cfg)
    out["policy"] = cfg.policy.describe()
    return out
