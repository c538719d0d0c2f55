"""Convolutional building blocks: RDB, URDB, ConvLSTM cell and ASPP.

All spatial convolutions use reflection padding so the output keeps the
input's height and width.  Every block accepts ``spectral=True`` to wrap its
convolutions in spectral normalization (used by the discriminators).
"""
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, NumericError, PreconditionError
from .spectral import spectral_norm

NEG_SLOPE = 0.2
RESIDUAL_SCALE = 0.1


@dataclass
class RdbConfig:
    num_layers: int = 4
    growth_rate: int = 16

    def __post_init__(self):
        if self.num_layers < 1 or self.growth_rate < 1:
            raise ConfigurationError(
                f"RDB needs num_layers >= 1 and growth_rate >= 1, got "
                f"{self.num_layers}, {self.growth_rate}")


@dataclass
class UrdbConfig:
    base_channels: int = 16
    rdb: RdbConfig = field(default_factory=RdbConfig)
    # the encoder and decoder depth are fixed at two blocks each
    contraction_blocks: int = 2
    expansion_blocks: int = 2

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")
        if self.contraction_blocks != 2 or self.expansion_blocks != 2:
            raise ConfigurationError("URDB uses exactly two contraction and two expansion blocks")


@dataclass
class AsppConfig:
    dilation_rates: tuple = (1, 2, 4)
    include_global_pool: bool = True

    def __post_init__(self):
        rates = tuple(self.dilation_rates)
        if not rates:
            raise ConfigurationError("ASPP needs at least one dilation rate")
        if any(r < 1 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigurationError(f"dilation rates must be >= 1 and strictly increasing: {rates}")
        self.dilation_rates = rates


def conv(in_ch, out_ch, kernel_size=3, stride=1, dilation=1, spectral=False, bias=True):
    pad = dilation * (kernel_size - 1) // 2
    layer = nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=pad,
                      dilation=dilation, bias=bias,
                      padding_mode="reflect" if pad else "zeros")
    nn.init.kaiming_normal_(layer.weight, a=NEG_SLOPE, nonlinearity="leaky_relu")
    if bias:
        nn.init.zeros_(layer.bias)
    return spectral_norm(layer) if spectral else layer


def _scale_init(layer, factor):
    # residual branches start small so stacked blocks stay near identity
    weight = getattr(layer, "parametrizations", None)
    weight = weight.weight.original if weight is not None else layer.weight
    with torch.no_grad():
        weight.mul_(factor)


def _check_finite(x, where):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activation in {where}")


class RDB(nn.Module):
    """Residual dense block: densely connected 3x3 convs, 1x1 fusion, residual add."""

    def __init__(self, channels, cfg=None, spectral=False):
        super().__init__()
        cfg = cfg or RdbConfig()
        self.channels = channels
        g = cfg.growth_rate
        self.layers = nn.ModuleList(
            conv(channels + i * g, g, spectral=spectral) for i in range(cfg.num_layers))
        self.fusion = conv(channels + cfg.num_layers * g, channels, kernel_size=1, spectral=spectral)
        _scale_init(self.fusion, RESIDUAL_SCALE)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ConfigurationError(f"RDB expects {self.channels} channels, got {x.shape[1]}")
        feats = [x]
        for i, layer in enumerate(self.layers):
            out = F.leaky_relu(layer(torch.cat(feats, 1)), NEG_SLOPE)
            _check_finite(out, f"RDB layer {i}")
            feats.append(out)
        return x + self.fusion(torch.cat(feats, 1))


class URDB(nn.Module):
    """UNet-shaped encoder/decoder whose blocks are RDBs.

    Two contraction blocks (channels base, 2*base) separated by 2x2 average
    pooling, then two expansion blocks (2*base, base) that upsample by
    nearest-neighbour + 3x3 conv and concatenate the symmetric encoder
    features before their RDB.  When input and output widths agree the
    block input is added to its output.
    """

    def __init__(self, in_channels, out_channels, cfg=None, residual=None):
        super().__init__()
        cfg = cfg or UrdbConfig()
        b = cfg.base_channels
        # outer skip keeps gradients alive through stacked URDBs
        self.residual = (in_channels == out_channels) if residual is None else residual
        self.encoder_channels = [b, 2 * b]
        self.decoder_channels = [2 * b, b]
        self.stem = conv(in_channels, b)
        self.enc1 = RDB(b, cfg.rdb)
        self.down2 = conv(b, 2 * b)
        self.enc2 = RDB(2 * b, cfg.rdb)
        self.bottleneck = RDB(2 * b, cfg.rdb)
        self.up1 = conv(2 * b, 2 * b)
        self.merge1 = conv(4 * b, 2 * b, kernel_size=1)
        self.dec1 = RDB(2 * b, cfg.rdb)
        self.up2 = conv(2 * b, b)
        self.merge2 = conv(2 * b, b, kernel_size=1)
        self.dec2 = RDB(b, cfg.rdb)
        self.out = conv(b, out_channels)
        if self.residual:
            _scale_init(self.out, RESIDUAL_SCALE)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise PreconditionError(
                f"URDB input spatial dims must be divisible by 4 (2 contractions), got {h}x{w}")
        if min(h, w) < 8:
            # the bottleneck RDB needs at least 2x2 for reflection padding
            raise PreconditionError(f"URDB input spatial dims must be at least 8, got {h}x{w}")
        act = lambda t: F.leaky_relu(t, NEG_SLOPE)  # noqa: E731
        s1 = self.enc1(act(self.stem(x)))
        s2 = self.enc2(act(self.down2(F.avg_pool2d(s1, 2))))
        z = self.bottleneck(F.avg_pool2d(s2, 2))
        d1 = act(self.up1(F.interpolate(z, scale_factor=2, mode="nearest")))
        d1 = self.dec1(self.merge1(torch.cat([d1, s2], 1)))
        d2 = act(self.up2(F.interpolate(d1, scale_factor=2, mode="nearest")))
        d2 = self.dec2(self.merge2(torch.cat([d2, s1], 1)))
        out = self.out(d2)
        if self.residual:
            out = out + x
        return out


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels, hidden_channels, kernel_size=3):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        # one conv computes the i, f, o gates and the candidate together
        self.gates = conv(in_channels + hidden_channels, 4 * hidden_channels, kernel_size)

    def init_state(self, x):
        n, _, h, w = x.shape
        z = x.new_zeros(n, self.hidden_channels, h, w)
        return z, z.clone()

    def forward(self, x, state=None):
        """One step. Returns ``(hidden, (hidden, cell))``."""
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"ConvLSTM expects {self.in_channels} input channels, got {x.shape[1]}")
        if state is None:
            state = self.init_state(x)
        h, c = state
        if h.shape != c.shape or h.shape[-2:] != x.shape[-2:] or h.shape[0] != x.shape[0]:
            raise ConfigurationError(
                f"ConvLSTM state {tuple(h.shape)}/{tuple(c.shape)} misaligned with input {tuple(x.shape)}")
        i, f, o, g = torch.chunk(self.gates(torch.cat([x, h], 1)), 4, dim=1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, (h, c)


class ASPP(nn.Module):
    def __init__(self, in_channels, out_channels, cfg=None):
        super().__init__()
        cfg = cfg or AsppConfig()
        self.rates = cfg.dilation_rates
        self.branches = nn.ModuleList(
            conv(in_channels, out_channels, dilation=r) for r in self.rates)
        self.pool = conv(in_channels, out_channels, kernel_size=1) if cfg.include_global_pool else None
        n_branches = len(self.rates) + (self.pool is not None)
        self.fusion = conv(n_branches * out_channels, out_channels, kernel_size=1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if max(self.rates) >= min(h, w):
            raise PreconditionError(
                f"dilation {max(self.rates)} too large for reflection padding on {h}x{w} input")
        outs = [F.leaky_relu(b(x), NEG_SLOPE) for b in self.branches]
        if self.pool is not None:
            p = F.leaky_relu(self.pool(x.mean(dim=(2, 3), keepdim=True)), NEG_SLOPE)
            outs.append(p.expand(-1, -1, h, w))
        return self.fusion(torch.cat(outs, 1))
