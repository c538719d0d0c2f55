import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from torch import nn

import oracles
from m2gan.blocks import RdbConfig
from m2gan.discriminators import Discriminator, DiscriminatorConfig
from m2gan.errors import ConfigurationError, PreconditionError
from m2gan.losses import (LossWeights, PerceptualBackbone, combine, disc_adv_loss, gen_adv_loss,
                          loss_disc_image, loss_disc_seg, loss_gen_adv, loss_mae, loss_perceptual,
                          loss_total)

LN2 = math.log(2.0)
TOY_D = DiscriminatorConfig(width=3, num_stages=1, rdb=RdbConfig(1, 2))


class Identity(nn.Module):
    def forward(self, x):
        return x


class ConstLogit(nn.Module):
    def forward(self, x):
        return x.new_full((x.shape[0],), 0.8)


def _logits(n=4, seed=0):
    return torch.randn(n, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


# -- MAE --------------------------------------------------------------------------------

def test_mae_values():
    a = torch.rand(2, 3, 4, 4)
    assert loss_mae(a, a) == 0
    assert loss_mae(a + 0.1, a).item() == pytest.approx(0.1, abs=1e-6)
    x = torch.zeros(1, 1, 2, 2)
    y = x.clone()
    y[0, 0, 1, 0] = 0.3
    assert loss_mae(y, x).item() == pytest.approx(0.075, abs=1e-7)


def test_mae_shape_mismatch():
    with pytest.raises(PreconditionError):
        loss_mae(torch.zeros(1, 3, 2, 2), torch.zeros(1, 3, 2, 3))


batch = arrays(np.float64, (2, 1, 3, 3), elements=st.floats(-1, 1))


@given(batch, batch, batch)
def test_mae_metric_properties(a, b, c):
    a, b, c = (torch.from_numpy(v) for v in (a, b, c))
    ab = loss_mae(a, b).item()
    assert ab >= 0
    assert (ab == 0) == torch.equal(a, b)
    assert ab == pytest.approx(loss_mae(b, a).item(), abs=1e-15)
    assert ab <= loss_mae(a, c).item() + loss_mae(c, b).item() + 1e-12


# -- perceptual ------------------------------------------------------------------------

def test_perceptual_equal_is_zero():
    bb = PerceptualBackbone()
    a = torch.rand(1, 3, 16, 16)
    assert loss_perceptual(a, a, bb) == 0


def test_perceptual_identity_backbone_is_mse():
    a, b = torch.rand(2, 3, 5, 5), torch.rand(2, 3, 5, 5)
    assert loss_perceptual(a, b, Identity()).item() == pytest.approx(F.mse_loss(a, b).item(), rel=1e-6)


def test_perceptual_matches_reexecution():
    bb = PerceptualBackbone(tap=3, seed=7).double()
    a = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    b = torch.rand(1, 3, 16, 16, dtype=torch.float64)

    def features(x):
        x = x[0].numpy()
        for i, layer in enumerate(bb.stages[:3]):
            x = oracles.leaky(oracles.apply_conv(layer, x, pad_mode="zeros"))
            if i < 2:
                x = oracles.avgpool2(x)
        return x

    expected = np.mean((features(a) - features(b)) ** 2)
    assert loss_perceptual(a, b, bb).item() == pytest.approx(expected, rel=1e-10)


def test_perceptual_nonnegative_and_frozen():
    bb = PerceptualBackbone()
    assert not any(p.requires_grad for p in bb.parameters())
    assert loss_perceptual(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8), bb) >= 0


def test_perceptual_backbone_validation():
    with pytest.raises(ConfigurationError):
        PerceptualBackbone(tap=5)
    with pytest.raises(ConfigurationError):
        loss_perceptual(torch.rand(1, 4, 8, 8), torch.rand(1, 4, 8, 8), PerceptualBackbone())


def test_backbone_weight_import():
    bb = PerceptualBackbone(seed=1)
    other = PerceptualBackbone(seed=2)
    bb.load_weights(other.state_dict())
    assert bb.kind == "external-weights"
    x = torch.rand(1, 3, 8, 8)
    assert torch.equal(bb(x), other(x))


# -- adversarial ---------------------------------------------------------------------------

def test_equal_logits_values():
    z = torch.full((4,), 0.3, dtype=torch.float64)
    assert disc_adv_loss(z, z, "standard").item() == pytest.approx(2 * LN2, abs=1e-12)
    assert disc_adv_loss(z, z, "literal").item() == 1.0
    assert gen_adv_loss(z, z, "standard").item() == pytest.approx(2 * LN2, abs=1e-12)
    assert gen_adv_loss(z, z, "literal").item() == -1.0


def test_gap_20_saturates():
    real = torch.full((3,), 10.0, dtype=torch.float64)
    fake = torch.full((3,), -10.0, dtype=torch.float64)
    assert disc_adv_loss(real, fake, "standard").item() < 1e-8


@pytest.mark.parametrize("mode,expected", [("standard", 2 * LN2), ("literal", 1.0)])
def test_seg_loss_identical_inputs(mode, expected):
    d = Discriminator(5, TOY_D).eval()
    # a homogeneous batch: every element, real or fake, gets the same logit
    z = torch.rand(1, 5, 8, 8).expand(3, -1, -1, -1).contiguous()
    assert loss_disc_seg((z, z.clone()), d, mode).item() == pytest.approx(expected, abs=1e-6)
    assert loss_disc_seg((z, z.clone()), ConstLogit(), mode).item() == pytest.approx(expected, abs=1e-7)


def test_seg_loss_identical_heterogeneous_batch_is_bounded_below():
    # batch-mean pairing: identical but varied batches cannot beat the equal-logit value
    d = Discriminator(5, TOY_D).eval()
    z = torch.rand(4, 5, 8, 8)
    assert loss_disc_seg((z, z.clone()), d, "standard").item() >= 2 * LN2 - 1e-6


@pytest.mark.parametrize("mode,expected", [("standard", 4 * LN2), ("literal", -2.0)])
def test_gen_loss_equal_logits(mode, expected):
    x, z = torch.rand(2, 3, 8, 8), torch.rand(2, 5, 8, 8)
    d = ConstLogit()
    val = loss_gen_adv((x, x), (z, z), d, d, mode).item()
    assert val == pytest.approx(expected, abs=1e-7)


def test_literal_zero_sum():
    real, fake = _logits(5, 1), _logits(5, 2)
    assert (gen_adv_loss(real, fake, "literal") + disc_adv_loss(real, fake, "literal")).item() == 0
    d = Discriminator(3, TOY_D).eval()
    xr, xf = torch.rand(3, 3, 8, 8), torch.rand(3, 3, 8, 8)
    g = loss_gen_adv((xr, xf), None, d, None, "literal")
    assert (g + loss_disc_image((xr, xf), d, "literal")).abs().item() < 1e-7


@given(st.integers(0, 10_000), st.floats(-30, 30), st.sampled_from(["standard", "literal"]))
def test_logit_shift_invariance(seed, c, mode):
    real, fake = _logits(4, seed), _logits(4, seed + 1) * 3
    for fn in (disc_adv_loss, gen_adv_loss):
        assert abs(fn(real, fake, mode).item() - fn(real + c, fake + c, mode).item()) <= 1e-9


def test_unknown_mode():
    with pytest.raises(ConfigurationError):
        disc_adv_loss(_logits(), _logits(), "wgan")


# -- total --------------------------------------------------------------------------------

def test_default_weights():
    w = LossWeights()
    assert (w.mae, w.perceptual, w.adversarial) == (0.1, 1.0, 0.001)


def test_combine_arithmetic():
    assert combine(0.2, 0.5, 3.0, LossWeights()) == pytest.approx(0.523, abs=1e-12)
    assert combine(0.0, 0.0, 0.0, LossWeights()) == 0


def test_negative_weights_rejected():
    with pytest.raises(ConfigurationError):
        LossWeights(-0.1, 1, 0.001)


def test_loss_total_linear_in_weights():
    bb = PerceptualBackbone()
    a, b = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
    base = loss_total(a, b, 2.0, LossWeights(0.1, 1.0, 0.001), bb)
    doubled = loss_total(a, b, 2.0, LossWeights(0.2, 1.0, 0.001), bb)
    assert (doubled - base).item() == pytest.approx(0.1 * loss_mae(a, b).item(), rel=1e-5)
    zero = loss_total(a, a, 0.0, (0.1, 1.0, 0.001), bb)
    assert zero.item() == 0


# -- gradients ---------------------------------------------------------------------------

def _toy_setup(seed=0):
    g = torch.Generator().manual_seed(seed)
    xr = torch.rand(3, 3, 4, 4, generator=g, dtype=torch.float64)
    xf = torch.rand(3, 3, 4, 4, generator=g, dtype=torch.float64).requires_grad_(True)
    torch.manual_seed(seed)
    d = Discriminator(3, TOY_D).double().eval()
    return xr, xf, d


def _small_backbone():
    return PerceptualBackbone(widths=(4, 4, 4), tap=3, seed=3).double()


@pytest.mark.parametrize("which", ["mae", "perceptual", "total"])
def test_reconstruction_gradients_wrt_fake(which):
    xr, xf, _ = _toy_setup()
    bb = _small_backbone()
    fn = {"mae": lambda: loss_mae(xf, xr),
          "perceptual": lambda: loss_perceptual(xf, xr, bb),
          "total": lambda: loss_total(xf, xr, 0.7, LossWeights(), bb)}[which]
    assert oracles.grad_rel_error(fn, [xf]) <= 1e-4


@pytest.mark.parametrize("mode", ["standard", "literal"])
@pytest.mark.parametrize("side", ["disc", "gen"])
def test_adversarial_gradients(mode, side):
    xr, xf, d = _toy_setup(1)
    fn_ = loss_disc_image if side == "disc" else (lambda p, d, m: loss_gen_adv(p, None, d, None, m))
    fn = lambda: fn_((xr, xf), d, mode)  # noqa: E731
    params = list(d.parameters())
    assert oracles.grad_rel_error(fn, [xf] + params) <= 1e-4
