"""Per-stage generator and the recurrent multi-stage pipeline."""
from dataclasses import dataclass, field

import torch
from torch import nn

from .blocks import ASPP, URDB, AsppConfig, ConvLSTMCell, UrdbConfig, conv
from .errors import ConfigurationError, PreconditionError, StateError
from .maps import attention_rain_map, init_priors, resize_nearest


@dataclass
class PipelineConfig:
    num_stages: int = 3
    share_weights: bool = True
    features: int = 16
    num_categories: int = 5
    num_urdbs: int = 3
    urdb: UrdbConfig = field(default_factory=UrdbConfig)
    aspp: AsppConfig = field(default_factory=AsppConfig)

    def __post_init__(self):
        if not 1 <= self.num_stages:
            raise ConfigurationError(f"num_stages must be >= 1, got {self.num_stages}")
        if self.num_categories < 2:
            raise ConfigurationError("num_categories must be >= 2")


def unit_clamp(x):
    """Clamp to [0, 1] in the forward pass, identity in the backward pass.

    A hard clamp has zero gradient outside the range, so a stage whose
    residual overshoots everywhere can never recover.  In-range values are
    returned bit-exactly.
    """
    return x + (x.clamp(0.0, 1.0) - x).detach()


@dataclass
class StageOutput:
    estimate: torch.Tensor
    next_state: tuple
    rain_map: torch.Tensor      # attention map of (O, estimate), consumed by the next stage
    seg_map_in: torch.Tensor    # segmentation prior this stage was conditioned on


class StageGenerator(nn.Module):
    """ConvLSTM coupling -> URDB x3 -> ASPP -> 3x3 head predicting a residual on O."""

    def __init__(self, cfg):
        super().__init__()
        self.in_channels = 3 + 1 + cfg.num_categories
        self.lstm = ConvLSTMCell(self.in_channels, cfg.features)
        self.urdbs = nn.Sequential(*[URDB(cfg.features, cfg.features, cfg.urdb)
                                     for _ in range(cfg.num_urdbs)])
        self.aspp = ASPP(cfg.features, cfg.features, cfg.aspp)
        self.head = conv(cfg.features, 3)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, observation, rain_map, seg_map, state=None):
        size = observation.shape[-2:]
        if rain_map.shape[0] != observation.shape[0] or seg_map.shape[0] != observation.shape[0]:
            raise PreconditionError("conditioning maps and observation differ in batch size")
        rain_map = resize_nearest(rain_map, size)
        seg_map = resize_nearest(seg_map, size)
        x = torch.cat([observation, rain_map, seg_map], 1)
        if x.shape[1] != self.in_channels:
            raise PreconditionError(
                f"stage input has {x.shape[1]} channels (3 + 1 + K), expected {self.in_channels}")
        h, state = self.lstm(x, state)
        residual = self.head(self.aspp(self.urdbs(h)))
        return unit_clamp(observation + residual), state


class M2GANGenerator(nn.Module):
    """Runs ``num_stages`` stages, threading ConvLSTM state and conditioning maps.

    Stage 1 is conditioned on :func:`init_priors`; stage k > 1 on the rain map
    of ``(O, B_{k-1})`` and the segmentation of ``B_{k-1}``.
    """

    def __init__(self, cfg, segmenter):
        super().__init__()
        if segmenter.num_categories != cfg.num_categories:
            raise ConfigurationError(
                f"segmenter has {segmenter.num_categories} categories, config expects {cfg.num_categories}")
        self.cfg = cfg
        self.segmenter = segmenter
        n_sets = 1 if cfg.share_weights else cfg.num_stages
        self.stages = nn.ModuleList(StageGenerator(cfg) for _ in range(n_sets))

    def stage(self, k):
        """Parameters used at (0-based) stage ``k``."""
        if self.cfg.share_weights:
            return self.stages[0]
        if k >= len(self.stages):
            raise StateError(f"stage {k + 1} requested but only {len(self.stages)} stages were trained")
        return self.stages[k]

    def forward(self, observation, num_stages=None):
        if observation.dim() != 4 or observation.shape[1] != 3:
            raise PreconditionError(f"expected (N, 3, H, W) observation, got {tuple(observation.shape)}")
        num_stages = num_stages or self.cfg.num_stages
        try:
            rain, seg = init_priors(observation, self.segmenter)
        except Exception as exc:
            raise RuntimeError(f"segmenter failed at stage 1: {exc}") from exc
        state = None
        outputs = []
        for k in range(num_stages):
            if k > 0:
                prev = outputs[-1].estimate
                rain = outputs[-1].rain_map
                try:
                    with torch.no_grad():
                        seg = self.segmenter(prev)
                except Exception as exc:
                    raise RuntimeError(f"segmenter failed at stage {k + 1}: {exc}") from exc
            estimate, state = self.stage(k)(observation, rain, seg, state)
            outputs.append(StageOutput(estimate, state, attention_rain_map(observation, estimate), seg))
        return outputs
