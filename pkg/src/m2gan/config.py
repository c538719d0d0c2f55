"""Run configuration: nested dataclasses loaded from YAML with dotted overrides."""
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import RainSynthesisConfig
from .discriminators import DiscriminatorConfig
from .errors import ConfigurationError
from .generator import PipelineConfig
from .losses import ADV_MODES, LossWeights

ABLATIONS = ("full", "no-seg", "no-disc")


@dataclass
class TrainConfig:
    epochs: int = 50
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    batch_size: int = 4
    crop_size: int = 96              # None trains on full images
    steps_per_epoch: int = None      # None: one pass over the data
    ablation: str = "full"
    adv_mode: str = "standard"
    weights: LossWeights = field(default_factory=LossWeights)
    lookahead_k: int = 5
    lookahead_alpha: float = 0.5
    betas: tuple = (0.9, 0.999)
    checkpoint_every: int = 1
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigurationError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.ablation not in ABLATIONS:
            raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.adv_mode not in ADV_MODES:
            raise ConfigurationError(f"adv_mode must be one of {ADV_MODES}, got {self.adv_mode!r}")
        if not 0 <= self.lookahead_alpha <= 1 or self.lookahead_k < 1:
            raise ConfigurationError("lookahead needs 0 <= alpha <= 1 and k >= 1")
        self.betas = tuple(self.betas)


@dataclass
class SegmenterConfig:
    seed: int = 0
    iterations: int = 5
    temperature: float = 0.01


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthesis: RainSynthesisConfig = field(default_factory=RainSynthesisConfig)
    perceptual_seed: int = 1234
    perceptual_tap: int = 3


def to_dict(cfg):
    def conv(v):
        if isinstance(v, tuple):
            return list(v)
        return v
    return {k: (to_dict(v) if dataclasses.is_dataclass(v) else conv(v))
            for k, v in ((f.name, getattr(cfg, f.name)) for f in dataclasses.fields(cfg))}


def from_dict(cls, data):
    """Build dataclass ``cls`` from a (possibly partial) nested dict."""
    data = dict(data or {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints.get(name)
        if dataclasses.is_dataclass(hint) and isinstance(value, dict):
            value = from_dict(hint, value)
        elif isinstance(value, list):
            value = tuple(value)
        elif hint is float and isinstance(value, (int, str)):
            value = float(value)
        kwargs[name] = value
    return cls(**kwargs)


def _parse_scalar(text):
    # YAML 1.1 reads "1e-3" as a string
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return yaml.safe_load(text)


def apply_overrides(data, overrides):
    """Apply ``key.sub=value`` strings onto a nested dict (values parsed as YAML)."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = _parse_scalar(raw)
    return data


def _merge(base, extra):
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
    return base


def load_config(path=None, overrides=(), base=None):
    """Resolve defaults < config file < overrides into a :class:`RunConfig`."""
    data = to_dict(base or RunConfig())
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must hold a mapping")
        _merge(data, loaded)
    apply_overrides(data, overrides)
    return from_dict(RunConfig, data)


def dump_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
