"""Generator and discriminator objectives.

Adversarial terms use the relativistic-average pairing: each logit is compared
with the batch mean of the opposite class.  Two readings are available:

* ``"standard"`` -- the usual negative log-likelihood form,
  ``f(y) = -log sigmoid(y)`` for the "should be larger" side and
  ``-log(1 - sigmoid(y))`` for the other.
* ``"literal"`` -- ``f1 = f2 = sigmoid`` and ``g1 = g2 = -sigmoid`` applied to the
  same four expectations, kept for comparison.
"""
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .discriminators import BatchPair
from .errors import ConfigurationError, PreconditionError

ADV_MODES = ("standard", "literal")


@dataclass
class LossWeights:
    mae: float = 0.1
    perceptual: float = 1.0
    adversarial: float = 0.001

    def __post_init__(self):
        if min(self.mae, self.perceptual, self.adversarial) < 0:
            raise ConfigurationError(f"loss weights must be non-negative: {self}")


def _check_mode(mode):
    if mode not in ADV_MODES:
        raise ConfigurationError(f"adversarial mode must be one of {ADV_MODES}, got {mode!r}")


def loss_mae(fake, real):
    """Per-element mean absolute error over batch, channels and pixels."""
    if fake.shape != real.shape:
        raise PreconditionError(f"MAE inputs differ: {tuple(fake.shape)} vs {tuple(real.shape)}")
    return (real - fake).abs().mean()


class PerceptualBackbone(nn.Module):
    """Frozen feature extractor for the perceptual loss.

    The default is a fixed-seed random CNN of four stages (3x3 conv + leaky
    ReLU, 2x average pooling after the first two).  ``tap`` selects the
    1-based stage whose output is compared.  Pretrained weights can replace
    the random ones via :meth:`load_weights`.
    """

    kind = "fixed-random-cnn"

    def __init__(self, in_channels=3, widths=(16, 32, 32, 64), tap=3, seed=1234):
        super().__init__()
        if not 1 <= tap <= len(widths):
            raise ConfigurationError(f"tap point {tap} invalid for a {len(widths)}-stage backbone")
        self.tap = tap
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        layers = []
        prev = in_channels
        for w in widths:
            c = nn.Conv2d(prev, w, 3, padding=1)
            with torch.no_grad():
                c.weight.copy_(torch.randn(c.weight.shape, generator=gen) * (2.0 / (prev * 9)) ** 0.5)
                c.bias.zero_()
            layers.append(c)
            prev = w
        self.stages = nn.ModuleList(layers)
        self.requires_grad_(False)

    def load_weights(self, state_dict):
        self.load_state_dict(state_dict)
        self.kind = "external-weights"
        self.requires_grad_(False)

    def forward(self, x):
        for i, layer in enumerate(self.stages[:self.tap]):
            x = F.leaky_relu(layer(x), 0.2)
            if i < 2 and i + 1 < self.tap:
                x = F.avg_pool2d(x, 2)
        return x


def loss_perceptual(fake, real, backbone):
    """Mean squared feature difference at the backbone tap, averaged over the batch."""
    if fake.shape != real.shape:
        raise PreconditionError(f"perceptual inputs differ: {tuple(fake.shape)} vs {tuple(real.shape)}")
    try:
        pf, pr = backbone(fake), backbone(real)
    except RuntimeError as exc:
        raise ConfigurationError(f"backbone rejected input of shape {tuple(fake.shape)}: {exc}") from exc
    return ((pf - pr) ** 2).mean()


def relativistic_terms(logits_real, logits_fake):
    """Relativistic differences ``(C(r) - E C(f), C(f) - E C(r))``."""
    return logits_real - logits_fake.mean(), logits_fake - logits_real.mean()


def disc_adv_loss(logits_real, logits_fake, mode="standard"):
    _check_mode(mode)
    dr, df = relativistic_terms(logits_real, logits_fake)
    if mode == "standard":
        # -log sigmoid(dr) - log(1 - sigmoid(df))
        return -F.logsigmoid(dr).mean() - F.logsigmoid(-df).mean()
    return torch.sigmoid(dr).mean() + torch.sigmoid(df).mean()


def gen_adv_loss(logits_real, logits_fake, mode="standard"):
    """Generator side of one domain; the roles of real and fake are swapped."""
    _check_mode(mode)
    dr, df = relativistic_terms(logits_real, logits_fake)
    if mode == "standard":
        return -F.logsigmoid(df).mean() - F.logsigmoid(-dr).mean()
    return -torch.sigmoid(dr).mean() - torch.sigmoid(df).mean()


def loss_disc_image(pair, disc, mode="standard"):
    pair = BatchPair(*pair).check()
    return disc_adv_loss(disc(pair.real), disc(pair.fake), mode)


def loss_disc_seg(pair, disc, mode="standard"):
    pair = BatchPair(*pair).check()
    return disc_adv_loss(disc(pair.real), disc(pair.fake), mode)


def loss_gen_adv(img_pair, seg_pair, d_img, d_seg, mode="standard"):
    """Image term plus, when ``d_seg`` is given, the segmentation term."""
    img_pair = BatchPair(*img_pair).check()
    loss = gen_adv_loss(d_img(img_pair.real), d_img(img_pair.fake), mode)
    if d_seg is not None:
        seg_pair = BatchPair(*seg_pair).check()
        loss = loss + gen_adv_loss(d_seg(seg_pair.real), d_seg(seg_pair.fake), mode)
    return loss


def combine(mae, perceptual, adversarial, weights):
    return weights.mae * mae + weights.perceptual * perceptual + weights.adversarial * adversarial


def loss_total(fake, real, adv_value, weights, backbone):
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    return combine(loss_mae(fake, real), loss_perceptual(fake, real, backbone), adv_value, weights)
