"""RDB-based, spectrally normalized discriminators and the relativistic pairing."""
from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import NEG_SLOPE, RDB, RdbConfig, conv
from .errors import ConfigurationError, PreconditionError
from .spectral import spectral_norm


@dataclass
class DiscriminatorConfig:
    width: int = 32
    num_stages: int = 3
    rdb: RdbConfig = field(default_factory=lambda: RdbConfig(num_layers=3, growth_rate=16))


class BatchPair(NamedTuple):
    real: torch.Tensor
    fake: torch.Tensor

    def check(self):
        if self.real.shape != self.fake.shape:
            raise PreconditionError(
                f"real/fake batches differ: {tuple(self.real.shape)} vs {tuple(self.fake.shape)}")
        if self.real.shape[0] < 1:
            raise PreconditionError("empty batch")
        return self


class Discriminator(nn.Module):
    """Stem conv, then ``num_stages`` x (RDB, stride-2 conv), global average pool, linear logit.

    Every convolution and the final linear layer are spectrally normalized.
    Returns one unbounded logit per batch element.
    """

    def __init__(self, in_channels, cfg=None):
        super().__init__()
        cfg = cfg or DiscriminatorConfig()
        self.in_channels = in_channels
        w = cfg.width
        self.stem = conv(in_channels, w, spectral=True)
        self.blocks = nn.ModuleList(RDB(w, cfg.rdb, spectral=True) for _ in range(cfg.num_stages))
        self.downs = nn.ModuleList(conv(w, w, stride=2, spectral=True) for _ in range(cfg.num_stages))
        self.head = spectral_norm(nn.Linear(w, 1))

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"discriminator configured for {self.in_channels} channels, got {x.shape[1]}")
        if x.shape[0] < 1:
            raise PreconditionError("empty batch")
        h = F.leaky_relu(self.stem(x), NEG_SLOPE)
        for block, down in zip(self.blocks, self.downs):
            h = F.leaky_relu(down(block(h)), NEG_SLOPE)
        return self.head(h.mean(dim=(2, 3))).squeeze(1)


def relativistic_prob(logit_a, mean_logit_b):
    """Probability that ``a`` is more realistic than the average ``b``."""
    def as_t(v):
        # plain Python numbers are evaluated in double precision
        return v if torch.is_tensor(v) else torch.as_tensor(v, dtype=torch.float64)
    return torch.sigmoid(as_t(logit_a) - as_t(mean_logit_b))
