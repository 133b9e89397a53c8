"""Experiment configuration: a JSON document with a fixed schema.

Every section is optional; missing keys take the defaults below and
unknown keys are rejected. Example::

    {
      "seed": 0,
      "vehicle": {"m": 1500.0, "V": 20.0},
      "maneuvers": [{"kind": "slalom", "amplitude": 0.05}],
      "dataset": {"count": 5000, "m": 100},
      "training": {"variant": "L1", "epochs": 25, "hidden": 64},
      "runtime": {"default_labels": [5e-4, 5e-4, 5e-4], "stride": 1, "runs": 25}
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .predictor import DEFAULT_HIDDEN
from .training import LossWeights, ModelContext
from .vehicle import (
    DEFAULT_LABELS,
    MANEUVERS,
    DatasetSpec,
    ManeuverSpec,
    ModelOptions,
    NoiseLabels,
    VehicleParams,
    system_model,
)


@dataclass(frozen=True)
class ModelSection:
    bicycle_b_over_v: bool = False
    printed_yaw_damping: bool = False
    load_transfer: float = 0.0
    dt: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.load_transfer < 1.0:
            raise ConfigurationError("load_transfer must lie in [0, 1)")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")

    def options(self) -> ModelOptions:
        return ModelOptions(self.bicycle_b_over_v, self.printed_yaw_damping)


@dataclass(frozen=True)
class TrainingSection:
    variant: str = "L1"
    W1: float = 1.0
    W2: float = 0.1
    W3: float = 0.1
    nis_target: float = 0.0
    lr: float = 1e-4
    batch_size: int = 128
    epochs: int = 25
    hidden: int = DEFAULT_HIDDEN
    val_fraction: float = 0.2
    normalize_inputs: bool = True

    def __post_init__(self):
        LossWeights(self.W1, self.W2, self.W3, self.variant, self.nis_target)
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.hidden < 1:
            raise ConfigurationError("training lr, batch_size, epochs and hidden must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError("val_fraction must lie in (0, 1)")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.W1, self.W2, self.W3, self.variant, self.nis_target)


@dataclass(frozen=True)
class RuntimeSection:
    default_labels: tuple[float, float, float] = tuple(float(v) for v in DEFAULT_LABELS.as_array())
    stride: int = 1
    runs: int = 25
    maneuver: str = "slalom"
    duration: float = 11.0

    def __post_init__(self):
        NoiseLabels.from_array(self.default_labels)
        if self.stride < 1 or self.runs < 1:
            raise ConfigurationError("runtime stride and runs must be at least 1")
        if self.maneuver not in MANEUVERS:
            raise ConfigurationError(f"unknown maneuver {self.maneuver!r}")
        if self.duration <= 0:
            raise ConfigurationError("runtime duration must be positive")

    def labels(self) -> NoiseLabels:
        return NoiseLabels.from_array(self.default_labels)


def _default_maneuvers() -> tuple[ManeuverSpec, ...]:
    return tuple(ManeuverSpec(kind=k) for k in MANEUVERS)


@dataclass(frozen=True)
class Config:
    seed: int = 0
    vehicle: VehicleParams = VehicleParams()
    model: ModelSection = ModelSection()
    maneuvers: tuple[ManeuverSpec, ...] = field(default_factory=_default_maneuvers)
    dataset: DatasetSpec = DatasetSpec()
    training: TrainingSection = TrainingSection()
    runtime: RuntimeSection = RuntimeSection()

    def __post_init__(self):
        if not self.maneuvers:
            raise ConfigurationError("at least one maneuver is required")
        if any(abs(s.dt - self.model.dt) > 0 for s in self.maneuvers):
            raise ConfigurationError("maneuver dt must equal model dt")

    def context(self) -> ModelContext:
        return ModelContext(system_model(self.vehicle, self.model.dt, self.model.options()))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["maneuvers"] = [asdict(s) for s in self.maneuvers]
        out["runtime"]["default_labels"] = list(self.runtime.default_labels)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


_SECTIONS = {
    "vehicle": VehicleParams,
    "model": ModelSection,
    "dataset": DatasetSpec,
    "training": TrainingSection,
    "runtime": RuntimeSection,
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    values = {}
    for name, value in data.items():
        expected = known[name].type
        if isinstance(value, bool) and "bool" not in str(expected):
            raise ConfigurationError(f"{where}.{name} must be a number")
        if isinstance(value, list):
            value = tuple(value)
        values[name] = value
    try:
        return cls(**values)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid {where}: {exc}") from None


def from_dict(data: dict) -> Config:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    allowed = {"seed", "maneuvers", *_SECTIONS}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
    values = {}
    if "seed" in data:
        seed = data["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigurationError("seed must be a non-negative integer")
        values["seed"] = seed
    for name, cls in _SECTIONS.items():
        if name in data:
            values[name] = _build(cls, data[name], name)
    if "maneuvers" in data:
        if not isinstance(data["maneuvers"], list):
            raise ConfigurationError("maneuvers must be a list")
        values["maneuvers"] = tuple(
            _build(ManeuverSpec, item, f"maneuvers[{i}]") for i, item in enumerate(data["maneuvers"])
        )
    try:
        return Config(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def load_config(path) -> Config:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return from_dict(data)


def override(cfg: Config, section: str, **changes) -> Config:
    """Return ``cfg`` with the given non-``None`` keys of one section replaced."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    if section == "":
        return replace(cfg, **changes)
    return replace(cfg, **{section: replace(getattr(cfg, section), **changes)})
