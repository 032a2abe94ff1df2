"""Experiment configuration: nested YAML onto dataclasses, with a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .channel import ChannelConfig
from .models import ModelConfig
from .optim import TrainConfig
from .poison import PoisonConfig


class ConfigError(ValueError):
    pass


@dataclass
class ClassifierDataConfig:
    n_classes: int = 10
    dim: int = 512
    noise: float = 0.25
    n_universal: int = 5000
    n_heldout: int = 1000
    pretrain_size: int = 5000
    prototype_size: int = 100  # labelled examples used to build the zero-shot head


@dataclass
class LMDataConfig:
    seq_len: int = 48
    pretrain_seqs: int = 3000
    background_seqs: int = 1000  # clean text the victim fine-tunes on alongside the canaries
    aux_seqs: int = 500
    test_seqs: int = 300
    canaries: int = 200
    reps: int = 10
    pool_size: int = 1000


@dataclass
class GameConfig:
    targets: int = 200
    shadows: int = 16
    attack: str = "lira"
    aux_fraction: float = 0.1
    train_fraction: float = 0.5
    trials: int = 1000
    head_sampling: str = "intersection"
    fpr: float = 0.01
    non_target: int = 200  # size of the non-target leakage pool (0 disables)


@dataclass
class ProbeConfig:
    calib_runs: int = 16
    seeds: int = 8
    percentile: float = 99.9
    fixed_randomness: bool = False
    reference_seqs: int = 32
    finetune_steps: int = 20
    finetune_lr: float = 1e-3
    ig_steps: int = 20
    t_share: float = 0.6
    exposure_candidates: int = 256
    amplify_factor: float = 5.0


@dataclass
class ExperimentConfig:
    name: str = "classifier"
    kind: str = "classifier"  # "classifier" | "lm"
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    out: str = "runs/classifier"
    rng: str = "philox4x64"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: ClassifierDataConfig | LMDataConfig = field(default_factory=ClassifierDataConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    poison: PoisonConfig | None = field(default_factory=PoisonConfig)
    game: GameConfig = field(default_factory=GameConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    probes: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        if self.kind not in ("classifier", "lm"):
            raise ConfigError(f"kind must be classifier or lm, got {self.kind!r}")
        if self.model.kind != self.kind:
            raise ConfigError(f"model kind {self.model.kind!r} does not match experiment kind {self.kind!r}")
        if self.kind == "classifier":
            if not isinstance(self.data, ClassifierDataConfig):
                raise ConfigError("classifier experiment needs classifier data settings")
            if self.model.d != self.data.dim:
                raise ConfigError(f"model input dim {self.model.d} != data dim {self.data.dim}")
            if self.model.n_classes != self.data.n_classes:
                raise ConfigError(f"model has {self.model.n_classes} classes, data has {self.data.n_classes}")
            if self.game.targets > self.data.n_universal:
                raise ConfigError("more targets than universal examples")
        else:
            if not isinstance(self.data, LMDataConfig):
                raise ConfigError("lm experiment needs lm data settings")
            if self.data.seq_len > self.model.ctx:
                raise ConfigError(f"seq_len {self.data.seq_len} exceeds context {self.model.ctx}")
            if self.game.targets > self.data.canaries:
                raise ConfigError("more targets than canaries")
        if self.rng != "philox4x64":
            raise ConfigError(f"unsupported rng algorithm {self.rng!r}")

    @property
    def out_dir(self) -> Path:
        return Path(os.environ.get("PBL_OUT") or self.out)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of every field that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out", None)
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def classifier_defaults() -> ExperimentConfig:
    return ExperimentConfig(
        model=ModelConfig(kind="classifier", d=512, h=256, layers=2, n_classes=10),
        pretrain=TrainConfig(steps=1000, lr=3e-3, batch_size=32),
        trainer=TrainConfig(epochs=5, lr=3e-3, batch_size=32),
        poison=PoisonConfig(alpha=0.5, direction="maximize", steps=2000, lr=3e-4, loss_cap=None),
    )


def lm_defaults() -> ExperimentConfig:
    return ExperimentConfig(
        name="lm",
        kind="lm",
        out="runs/lm",
        model=ModelConfig.lm_default(),
        data=LMDataConfig(),
        pretrain=TrainConfig(steps=800, lr=3e-3, batch_size=32),
        trainer=TrainConfig(epochs=1, lr=5e-4, batch_size=32),
        poison=PoisonConfig(alpha=0.75, direction="minimize", steps=300, lr=1e-3, aux_batch=16, target_batch=16),
        game=GameConfig(targets=100, attack="loss"),
    )


def defaults(kind: str = "classifier") -> ExperimentConfig:
    if kind == "classifier":
        return classifier_defaults()
    if kind == "lm":
        return lm_defaults()
    raise ConfigError(f"unknown kind {kind!r}")


_SECTIONS = {
    "model": ModelConfig,
    "pretrain": TrainConfig,
    "trainer": TrainConfig,
    "poison": PoisonConfig,
    "game": GameConfig,
    "probes": ProbeConfig,
}


def _merge(obj, overrides: dict, where: str):
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = set(overrides) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return dataclasses.replace(obj, **overrides)


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    cfg = defaults(raw.get("kind", "classifier"))
    kw = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if key == "poison" and value in (None, False):
                kw["poison"] = None
                continue
            base = getattr(cfg, key) or _SECTIONS[key]()
            kw[key] = _merge(base, value, key)
        elif key == "data":
            kw["data"] = _merge(cfg.data, value, "data")
        elif key == "channel":
            if isinstance(value, str):
                kw["channel"] = ChannelConfig.parse(value)
            else:
                value = dict(value)
                kind = value.pop("kind", None)
                kw["channel"] = ChannelConfig.parse(kind, **value) if kind else _merge(cfg.channel, value, "channel")
        elif key in ("name", "kind", "seeds", "out", "rng"):
            kw[key] = list(value) if key == "seeds" else value
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    try:
        return dataclasses.replace(cfg, **kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path=None, kind: str | None = None) -> ExperimentConfig:
    if path is None:
        return defaults(kind or "classifier")
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if kind and "kind" not in raw:
        raw["kind"] = kind
    return from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
