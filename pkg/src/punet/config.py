"""Flat run configuration shared by every CLI command.

The JSON file is a single object whose keys are the field names of
:class:`RunConfig`; unknown keys are rejected. Command-line flags override
file values, and each command writes the resolved configuration next to its
outputs as ``config.resolved.json``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import FineTuneMode, Insertion, UNetConfig
from .synth import DomainStyle, RaterProfile, SynthConfig, default_profiles
from .training import Schedule, TrainingStrategy

SEED_ENV = "PUNET_SEED"


@dataclass
class RunConfig:
    seed: int = 0
    # network
    input_size: list[int] = field(default_factory=lambda: [64, 64])
    stages: int = 3
    base_channels: int = 16
    channel_mults: list[int] = field(default_factory=lambda: [1, 2, 4, 16])
    classes: int = 2
    heads: int = 2
    ffn_ratio: int = 4
    prompt_dim: int | None = None
    prompt_tokens: int = 1
    insertion: str = "both"
    # raters and data
    rater_dilations: list[int] = field(default_factory=lambda: [-2, -1, 0, 0, 1, 2])
    rater_jitter: list[float] = field(default_factory=lambda: [0.5, 0.7, 0.9, 1.1, 1.3, 1.5])
    n_source: int = 64
    n_train: int = 64
    n_test: int = 16
    target_shift: float = 0.15
    target_contrast: float = 0.8
    # optimisation
    batch_size: int = 4
    dice_smooth: float = 1.0
    pretrain_lr: float = 3e-4
    pretrain_epochs: int = 20
    pretrain_drops: list[int] = field(default_factory=lambda: [12, 17])
    finetune_lr: float = 0.01
    finetune_epochs: int = 8
    finetune_drops: list[int] = field(default_factory=lambda: [5, 7])
    lr_drop_factor: float = 10.0
    strategy: str = "mix"
    mode: str = "prompt"
    # prompt-mode fine-tuning refuses models whose trainable share exceeds this
    max_prompt_ratio: float = 0.01
    # execution and paths
    threads: int = 1
    source_dir: str = "runs/data/source"
    target_dir: str = "runs/data/target"
    pretrained_dir: str = "runs/pretrained"
    checkpoint_dir: str = "runs/finetuned"
    report_dir: str = "runs/report"

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        try:
            Insertion(self.insertion)
            TrainingStrategy(self.strategy)
            FineTuneMode(self.mode)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if len(self.rater_dilations) != len(self.rater_jitter):
            raise ConfigError("rater_dilations and rater_jitter must have equal length")
        if len(self.rater_dilations) < 2:
            raise ConfigError("at least two raters are required")
        for key in ("n_source", "n_train", "n_test", "batch_size", "pretrain_epochs", "finetune_epochs"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        self.unet()
        for p in self.profiles():
            p.validate(tuple(self.input_size))

    # -- derived objects ---------------------------------------------------

    @property
    def n_raters(self) -> int:
        return len(self.rater_dilations)

    def unet(self, **overrides) -> UNetConfig:
        d = dict(
            stages=self.stages,
            base_channels=self.base_channels,
            channel_mults=tuple(self.channel_mults),
            input_size=tuple(self.input_size),
            classes=self.classes,
            heads=self.heads,
            ffn_ratio=self.ffn_ratio,
            prompt_dim=self.prompt_dim,
            prompt_tokens=self.prompt_tokens,
            insertion=self.insertion,
            n_raters=self.n_raters,
        )
        d.update(overrides)
        try:
            return UNetConfig(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def profiles(self) -> list[RaterProfile]:
        return default_profiles(self.rater_dilations, self.rater_jitter)

    def synth(self) -> SynthConfig:
        return SynthConfig(
            size=tuple(self.input_size),
            target=DomainStyle(
                intensity_shift=self.target_shift, contrast=self.target_contrast, texture_amp=0.06, noise_sigma=0.04
            ),
        )

    def pretrain_schedule(self) -> Schedule:
        return Schedule(self.pretrain_lr, tuple(self.pretrain_drops), self.lr_drop_factor, self.pretrain_epochs)

    def finetune_schedule(self) -> Schedule:
        return Schedule(self.finetune_lr, tuple(self.finetune_drops), self.lr_drop_factor, self.finetune_epochs)

    # -- (de)serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = sorted(set(d) - set(cls.keys()))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def replace(self, **overrides) -> "RunConfig":
        d = self.to_dict()
        d.update(overrides)
        return RunConfig.from_dict(d)

    def write(self, directory: str | os.PathLike) -> Path:
        path = Path(directory) / "config.resolved.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config (or defaults), apply overrides and the seed fallback."""
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
    overrides = dict(overrides or {})
    if "seed" not in data and "seed" not in overrides and os.environ.get(SEED_ENV):
        try:
            overrides["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    unknown = sorted((set(data) | set(overrides)) - set(RunConfig.keys()))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    data.update(overrides)
    return RunConfig.from_dict(data)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
