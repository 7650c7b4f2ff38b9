"""Run configuration: a JSON document validated into nested dataclasses.

Unknown keys and out-of-range values are rejected at parse time with the
offending key path in the message.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    seed: int = 0
    n: int = 4000
    num_identities: int = 16
    num_heldout: int = 4
    nonhuman_fraction: float = 0.0

    def validate(self):
        _check(self.n > 0, "dataset.n", "must be positive")
        _check(self.num_identities >= 2, "dataset.num_identities", "must be >= 2")
        _check(self.num_heldout >= 2, "dataset.num_heldout", "must be >= 2")
        _check(0.0 <= self.nonhuman_fraction < 1.0, "dataset.nonhuman_fraction", "must lie in [0, 1)")


@dataclass
class TrainConfig:
    lr: float = 2e-3
    lr_final_frac: float = 0.1
    batch: int = 24
    steps: int = 5000
    id_epochs: int = 8
    id_lr: float = 2e-3
    prior_epochs: int = 30
    prior_lr: float = 2e-3
    p_style: float = 0.64
    p_face: float = 0.10
    unet_width: int = 16          # channels at 24x24
    unet_mid_width: int = 64      # channels at 12x12 and 6x6
    fusion_id_gain: float = 8.0
    sigma_data: float = 0.0       # > 0 switches on output preconditioning in the U-Net

    def validate(self):
        _check(self.lr > 0, "train.lr", "must be positive")
        _check(0.0 < self.lr_final_frac <= 1.0, "train.lr_final_frac", "must lie in (0, 1]")
        _check(self.batch >= 1, "train.batch", "must be >= 1")
        _check(1 <= self.steps <= 100_000, "train.steps", "must lie in [1, 100000]")
        _check(self.id_epochs >= 1, "train.id_epochs", "must be >= 1")
        _check(self.id_lr > 0, "train.id_lr", "must be positive")
        _check(self.prior_epochs >= 1, "train.prior_epochs", "must be >= 1")
        _check(self.prior_lr > 0, "train.prior_lr", "must be positive")
        _check(0.0 <= self.p_style <= 1.0, "train.p_style", "must lie in [0, 1]")
        _check(0.0 <= self.p_face <= 1.0, "train.p_face", "must lie in [0, 1]")
        _check(self.unet_width >= 2, "train.unet_width", "must be >= 2")
        _check(self.unet_mid_width >= 2, "train.unet_mid_width", "must be >= 2")
        _check(self.fusion_id_gain > 0, "train.fusion_id_gain", "must be positive")
        _check(self.sigma_data >= 0, "train.sigma_data", "must be >= 0")


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 1.2e-2

    def validate(self):
        _check(self.T >= 2, "schedule.T", "must be >= 2")
        _check(0.0 < self.beta_start < self.beta_end < 1.0, "schedule.beta_start",
               "need 0 < beta_start < beta_end < 1")


@dataclass
class SampleConfig:
    steps: int = 25
    cfg_weight: float = 3.0
    alpha: float = 1.0
    beta_weights: list = field(default_factory=list)
    strength: float = 0.3
    seed: int = 0

    def validate(self):
        _check(self.steps >= 1, "sample.steps", "must be >= 1")
        _check(self.cfg_weight >= 0, "sample.cfg_weight", "must be >= 0")
        _check(0.0 <= self.alpha <= 1.0, "sample.alpha", "must lie in [0, 1]")
        _check(0.0 <= self.strength <= 1.0, "sample.strength", "must lie in [0, 1]")
        if self.beta_weights:
            _check(all(isinstance(b, (int, float)) and b >= 0 for b in self.beta_weights),
                   "sample.beta_weights", "must be non-negative numbers")
            _check(abs(sum(self.beta_weights) - 1.0) <= 1e-6, "sample.beta_weights", "must sum to 1")


@dataclass
class EvalConfig:
    seeds_per_identity: int = 13
    num_refs: int = 11
    seed: int = 0
    swap_trials: int = 50
    img2img_seeds: int = 20

    def validate(self):
        _check(self.seeds_per_identity >= 1, "eval.seeds_per_identity", "must be >= 1")
        _check(self.num_refs >= 1, "eval.num_refs", "must be >= 1")
        _check(self.swap_trials >= 1, "eval.swap_trials", "must be >= 1")
        _check(self.img2img_seeds >= 1, "eval.img2img_seeds", "must be >= 1")


@dataclass
class PathsConfig:
    runs_root: str = "runs"


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if hasattr(section, "validate"):
                section.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def training_hash(self) -> str:
        """Hash of everything that determines trained weights (names the run directory)."""
        d = self.to_dict()
        key = {k: d[k] for k in ("dataset", "train", "schedule")}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:12]

    def section_hash(self, *sections: str) -> str:
        d = self.to_dict()
        return hashlib.sha256(json.dumps({k: d[k] for k in sections}, sort_keys=True).encode()).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.paths.runs_root) / self.training_hash()


def _check(ok: bool, key: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"{key}: {msg}")


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_SECTION_CLASSES = {"dataset": DatasetConfig, "train": TrainConfig, "schedule": ScheduleConfig,
                    "sample": SampleConfig, "eval": EvalConfig, "paths": PathsConfig}


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = RunConfig()
    for name, body in data.items():
        if name not in _SECTION_CLASSES:
            raise ConfigError(f"{name}: unknown section (expected one of {sorted(_SECTION_CLASSES)})")
        if not isinstance(body, dict):
            raise ConfigError(f"{name}: section must be an object")
        section = getattr(cfg, name)
        known = {f.name for f in dataclasses.fields(section)}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"{name}.{key}: unknown key")
            setattr(section, key, _coerce(f"{name}.{key}", value, getattr(section, key)))
    return cfg.validate()


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply dotted-key overrides such as {"sample.alpha": 0.5}."""
    data = cfg.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in data or key not in data[section]:
            raise ConfigError(f"{dotted}: unknown key")
        data[section][key] = value
    return from_dict(data)


def reference_config() -> RunConfig:
    """The reference run: 16 identities on a 24x24 canvas."""
    return RunConfig().validate()


def tiny_config(runs_root: str = "runs") -> RunConfig:
    """Smoke-test configuration (n=160, 120 diffusion steps)."""
    return from_dict({
        "dataset": {"n": 160},
        "train": {"steps": 120, "batch": 8, "id_epochs": 3, "prior_epochs": 5},
        "eval": {"seeds_per_identity": 1, "num_refs": 2, "swap_trials": 2, "img2img_seeds": 1},
        "paths": {"runs_root": runs_root},
    })
