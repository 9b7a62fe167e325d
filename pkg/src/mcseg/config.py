"""Run configuration: a JSON document with defaults, plus command-line overrides.

Schema (all keys optional; omitted keys take the defaults below)::

    {
      "variant": "dual_diff",              # dual_diff | dual_flow | single
      "width_mult": 1.0, "blocks_per_stage": [3, 4, 6, 3],
      "bottleneck_channels": 1024, "decoder_channels": [256, 128, 64, 32, 16],
      "lr": 0.005, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
      "batch_size": 16, "epochs": 100, "seeds": [0, 1, 2, 3, 4],
      "data": null, "test_data": null,     # dataset roots in the images/ + annotations/ layout
      "resolution": [384, 384],
      "horn_schunck": {"alpha": 1.0, "iterations": 200, "early_stop_delta": 1e-4},
      "folds": 4, "fold_seed": 0,
      "stationary": [], "stationary_only": false,
      "condition": "default", "tolerance_px": null,
      "output_dir": "runs",
      "checkpoints": [], "predictions": null, "oracle": null,   # eval inputs
      "report": null,                      # eval CSV path, default <output_dir>/eval.csv
      "synth": {...},                      # see SynthConfig
      "bench": {...}                       # see BenchConfig
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .data import check_resolution
from .errors import ConfigError
from .model import VARIANTS, NetConfig
from .motion import HornSchunckParams
from .train import OptimConfig


@dataclass
class SynthConfig:
    count: int = 20
    seed: int = 0
    canvas: Tuple[int, int] = (96, 96)
    frames: int = 8
    size: int = 24
    speed: Tuple[float, float] = (2.0, 4.0)
    distractor: bool = True
    camera_pan: Tuple[float, float] = (0.0, 0.0)
    texture: str = "noise"
    prefix: str = "clip"


@dataclass
class BenchConfig:
    resolutions: List[str] = field(default_factory=lambda: ["480p"])
    repetitions: int = 3
    frames: int = 4  # synthetic frames when no dataset is given
    threads: int = 1
    iterations: int = 100


RESOLUTION_ALIASES = {"480p": (480, 854), "360p": (360, 640), "240p": (240, 426), "720p": (720, 1280)}


def parse_resolution(text) -> Tuple[int, int]:
    """``480p`` or ``HxW`` (a two-element list is also accepted)."""
    if isinstance(text, (list, tuple)):
        h, w = text
        return int(h), int(w)
    text = str(text).strip().lower()
    if text in RESOLUTION_ALIASES:
        return RESOLUTION_ALIASES[text]
    try:
        h, w = (int(v) for v in text.split("x"))
    except ValueError:
        raise ConfigError(f"cannot parse resolution {text!r}; use 480p or HxW", field="resolution") from None
    if h < 1 or w < 1:
        raise ConfigError(f"resolution {text!r} must be positive", field="resolution")
    return h, w


@dataclass
class RunConfig:
    variant: str = "dual_diff"
    width_mult: float = 1.0
    blocks_per_stage: Tuple[int, int, int, int] = (3, 4, 6, 3)
    bottleneck_channels: int = 1024
    decoder_channels: Tuple[int, ...] = (256, 128, 64, 32, 16)
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 100
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    data: Optional[str] = None
    test_data: Optional[str] = None
    resolution: Tuple[int, int] = (384, 384)
    horn_schunck: HornSchunckParams = field(default_factory=HornSchunckParams)
    folds: int = 4
    fold_seed: int = 0
    stationary: List[str] = field(default_factory=list)
    stationary_only: bool = False
    condition: str = "default"
    tolerance_px: Optional[int] = None
    output_dir: str = "runs"
    checkpoints: List[str] = field(default_factory=list)
    predictions: Optional[str] = None
    oracle: Optional[str] = None
    report: Optional[str] = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def __post_init__(self):
        self.blocks_per_stage = tuple(self.blocks_per_stage)
        self.decoder_channels = tuple(self.decoder_channels)
        self.resolution = tuple(self.resolution)
        self.seeds = [int(s) for s in self.seeds]
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}", field="variant")
        for name in ("batch_size", "epochs", "folds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}", field=name)
        if not self.seeds:
            raise ConfigError("at least one seed is required", field="seeds")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {self.seeds}", field="seeds")
        if self.oracle not in (None, "gt", "empty"):
            raise ConfigError(f"oracle must be gt or empty, got {self.oracle!r}", field="oracle")
        if self.bench.repetitions < 3:
            raise ConfigError("bench.repetitions must be >= 3", field="bench.repetitions")
        if self.bench.frames < 2:
            raise ConfigError("bench.frames must be >= 2", field="bench.frames")
        check_resolution(self.resolution)
        self.optim()
        self.net()

    def net(self) -> NetConfig:
        return NetConfig(width_mult=self.width_mult, blocks_per_stage=self.blocks_per_stage,
                         bottleneck_channels=self.bottleneck_channels, variant=self.variant,
                         decoder_channels=self.decoder_channels)

    def optim(self) -> OptimConfig:
        from .tensor import AdamState
        try:
            AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        except ValueError as exc:
            raise ConfigError(str(exc), field="lr") from None
        return OptimConfig(self.lr, self.beta1, self.beta2, self.eps)

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))  # tuples become lists

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        _check_keys(cls, d, "")
        nested = {"horn_schunck": HornSchunckParams, "synth": SynthConfig, "bench": BenchConfig}
        for key, kind in nested.items():
            if key in d:
                if not isinstance(d[key], dict):
                    raise ConfigError(f"{key} must be an object", field=key)
                _check_keys(kind, d[key], key + ".")
                sub = dict(d[key])
                for f in fields(kind):
                    if f.name in sub and isinstance(sub[f.name], list) and "Tuple" in str(f.type):
                        sub[f.name] = tuple(sub[f.name])
                d[key] = kind(**sub)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad configuration value: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found", field="config")
        return cls.from_json(path.read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def with_overrides(self, overrides: Sequence[str]) -> "RunConfig":
        """Apply ``key=value`` strings; dotted keys reach nested sections, values parse as JSON."""
        d = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value", field=item)
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            target = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(target.get(p), dict):
                    raise ConfigError(f"unknown config section {p!r}", field=key)
                target = target[p]
            if parts[-1] not in target:
                raise ConfigError(f"unknown config field {key!r}", field=key)
            target[parts[-1]] = value
        return RunConfig.from_dict(d)


def _check_keys(kind, d: dict, prefix: str):
    known = {f.name for f in fields(kind)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config field {prefix}{unknown[0]!r}", field=prefix + unknown[0])


def toy_config(**kw) -> RunConfig:
    """Quarter-width, one block per stage; small enough for a desktop core."""
    base = RunConfig(width_mult=0.25, blocks_per_stage=(1, 1, 1, 1), resolution=(96, 96))
    return replace(base, **kw) if kw else base
