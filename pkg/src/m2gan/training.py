"""Adversarial training: Lookahead optimizer, LR schedule, train step, checkpoints."""
import contextlib
import csv
import hashlib
import io
import logging
import math
import os
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, dump_config, from_dict, to_dict
from .data import crop_window, to_tensor
from .discriminators import Discriminator
from .errors import CheckpointVersionError, NumericError, PreconditionError, StateError
from .evaluation import psnr_torch
from .generator import M2GANGenerator
from .losses import (PerceptualBackbone, combine, disc_adv_loss, gen_adv_loss, loss_mae,
                     loss_perceptual)
from .maps import ToySegmenter

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_FIELDS = ["step", "epoch", "lr", "d_img", "d_seg", "g_total", "g_mae", "g_perceptual",
              "g_adv", "psnr"]


# -- lookahead ------------------------------------------------------------------

@dataclass
class LookaheadState:
    slow: dict
    k: int = 5
    alpha: float = 0.5
    step_counter: int = 0


def lookahead_step(fast, state):
    """Advance the Lookahead counter after an inner update already applied to ``fast``.

    Every ``k`` calls the slow weights move ``alpha`` of the way toward the
    fast ones and the fast weights are reset to them.  ``fast`` maps names to
    tensors and is updated in place; ``(fast, state)`` is returned.
    """
    if fast.keys() != state.slow.keys():
        raise StateError("fast and slow parameter names differ")
    for name, p in fast.items():
        if p.shape != state.slow[name].shape:
            raise StateError(f"shape drift for {name}: fast {tuple(p.shape)} vs slow "
                             f"{tuple(state.slow[name].shape)}")
    state.step_counter += 1
    if state.step_counter % state.k == 0:
        with torch.no_grad():
            for name, p in fast.items():
                s = state.slow[name]
                # lerp with weight 1 returns the end point exactly
                s.lerp_(p, state.alpha)
                p.copy_(s)
    return fast, state


class Lookahead:
    """Wraps a torch optimizer with Lookahead slow weights."""

    def __init__(self, named_params, base, k=5, alpha=0.5):
        self.params = dict(named_params)
        self.base = base
        self.state = LookaheadState(
            slow={n: p.detach().clone() for n, p in self.params.items()}, k=k, alpha=alpha)

    @property
    def param_groups(self):
        return self.base.param_groups

    def set_lr(self, lr):
        for g in self.base.param_groups:
            g["lr"] = lr

    def zero_grad(self):
        self.base.zero_grad(set_to_none=True)

    def step(self):
        self.base.step()
        lookahead_step(self.params, self.state)

    def state_dict(self):
        return {"base": self.base.state_dict(), "slow": self.state.slow,
                "k": self.state.k, "alpha": self.state.alpha, "step_counter": self.state.step_counter}

    def load_state_dict(self, sd):
        self.base.load_state_dict(sd["base"])
        for n, s in sd["slow"].items():
            if n not in self.state.slow or self.state.slow[n].shape != s.shape:
                raise StateError(f"lookahead slow weight {n} does not match the model")
            self.state.slow[n].copy_(s)
        self.state.k, self.state.alpha = sd["k"], sd["alpha"]
        self.state.step_counter = sd["step_counter"]


def make_optimizer(module, cfg):
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    base = torch.optim.Adam([p for _, p in named], lr=cfg.lr_start, betas=cfg.betas, weight_decay=0.0)
    return Lookahead(named, base, k=cfg.lookahead_k, alpha=cfg.lookahead_alpha)


def lr_schedule(epoch, cfg):
    """Log-linear decay from ``lr_start`` at epoch 0 to ``lr_end`` at epoch ``epochs - 1``.

    Fractional epochs are accepted, so the schedule can also be stepped per
    iteration.
    """
    if not 0 <= epoch < cfg.epochs:
        raise PreconditionError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lr_start
    t = min(epoch / (cfg.epochs - 1), 1.0)
    return float(math.exp((1 - t) * math.log(cfg.lr_start) + t * math.log(cfg.lr_end)))


# -- models ---------------------------------------------------------------------

def seed_everything(seed, deterministic=True):
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


class Models:
    """Generator, discriminators (as the ablation allows), segmenter and backbone."""

    def __init__(self, cfg):
        self.cfg = cfg
        t = cfg.train
        self.segmenter = ToySegmenter(cfg.pipeline.num_categories, cfg.segmenter.seed,
                                      cfg.segmenter.iterations, cfg.segmenter.temperature)
        self.generator = M2GANGenerator(cfg.pipeline, self.segmenter)
        self.d_img = Discriminator(3, cfg.discriminator) if t.ablation != "no-disc" else None
        self.d_seg = (Discriminator(cfg.pipeline.num_categories, cfg.discriminator)
                      if t.ablation == "full" else None)
        self.backbone = PerceptualBackbone(tap=cfg.perceptual_tap, seed=cfg.perceptual_seed)

    def components(self):
        out = {"generator": self.generator}
        if self.d_img is not None:
            out["d_img"] = self.d_img
        if self.d_seg is not None:
            out["d_seg"] = self.d_seg
        return out

    def num_parameters(self):
        return sum(p.numel() for m in self.components().values() for p in m.parameters())


def parameter_digest(module):
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@contextlib.contextmanager
def _component(name):
    # tag numeric failures raised deep inside a block with the owning component
    try:
        yield
    except NumericError as e:
        if str(e).startswith(f"{name}:"):
            raise
        raise NumericError(f"{name}: {e}") from e


def _finite(value, component):
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite loss in {component}")
    return value


class Trainer:
    def __init__(self, cfg=None):
        self.cfg = cfg or RunConfig()
        t = self.cfg.train
        seed_everything(t.seed, t.deterministic)
        self.models = Models(self.cfg)
        self.opt_g = make_optimizer(self.models.generator, t)
        self.opt_d_img = make_optimizer(self.models.d_img, t) if self.models.d_img else None
        self.opt_d_seg = make_optimizer(self.models.d_seg, t) if self.models.d_seg else None
        self.epoch = 0          # next epoch to run
        self.step_count = 0
        self.rng = np.random.default_rng(t.seed)

    def optimizers(self):
        out = {"generator": self.opt_g}
        if self.opt_d_img:
            out["d_img"] = self.opt_d_img
        if self.opt_d_seg:
            out["d_seg"] = self.opt_d_seg
        return out

    def set_lr(self, lr):
        for opt in self.optimizers().values():
            opt.set_lr(lr)

    # -- one step -------------------------------------------------------------

    def d_img_step(self, fakes, clean):
        """Update the image discriminator on detached fakes; returns its loss."""
        d, mode = self.models.d_img, self.cfg.train.adv_mode
        with _component("d_img"):
            real_logits = d(clean)
            loss = sum(disc_adv_loss(real_logits, d(f.detach()), mode) for f in fakes) / len(fakes)
        self.opt_d_img.zero_grad()
        _finite(loss, "d_img").backward()
        self.opt_d_img.step()
        return loss.item()

    def d_seg_step(self, fakes, clean):
        """Update the segmentation discriminator on segmenter outputs; returns its loss."""
        m, mode = self.models, self.cfg.train.adv_mode
        with torch.no_grad():
            seg_real = m.segmenter(clean)
            seg_fakes = [m.segmenter(f.detach()) for f in fakes]
        with _component("d_seg"):
            real_logits = m.d_seg(seg_real)
            loss = sum(disc_adv_loss(real_logits, m.d_seg(z), mode) for z in seg_fakes) / len(fakes)
        self.opt_d_seg.zero_grad()
        _finite(loss, "d_seg").backward()
        self.opt_d_seg.step()
        return loss.item()

    def _discriminators(self):
        return [d for d in (self.models.d_img, self.models.d_seg) if d is not None]

    def generator_loss(self, fakes, clean):
        """Stage-averaged generator objective with the discriminators held fixed.

        Returns ``(total, parts)`` where ``parts`` holds the stage-mean MAE,
        perceptual and adversarial values as floats.
        """
        m, t = self.models, self.cfg.train
        mode = t.adv_mode
        weights = t.weights
        if m.d_img is None:
            weights = type(weights)(weights.mae, weights.perceptual, 0.0)
        discs = self._discriminators()
        # frozen parameters and spectral vectors while the generator is scored
        for d in discs:
            d.requires_grad_(False).eval()
        try:
            total = 0.0
            parts = {"g_mae": 0.0, "g_perceptual": 0.0, "g_adv": 0.0}
            img_real = m.d_img(clean) if m.d_img is not None else None
            seg_real = m.d_seg(m.segmenter(clean).detach()) if m.d_seg is not None else None
            for f in fakes:
                mae = loss_mae(f, clean)
                perc = loss_perceptual(f, clean, m.backbone)
                adv = f.new_zeros(())
                if m.d_img is not None:
                    adv = adv + gen_adv_loss(img_real, m.d_img(f), mode)
                if m.d_seg is not None:
                    adv = adv + gen_adv_loss(seg_real, m.d_seg(m.segmenter(f)), mode)
                total = total + combine(mae, perc, adv, weights)
                parts["g_mae"] += mae.item()
                parts["g_perceptual"] += perc.item()
                parts["g_adv"] += adv.item()
        finally:
            for d in discs:
                d.requires_grad_(True).train()
        n = len(fakes)
        return _finite(total / n, "generator"), {k: v / n for k, v in parts.items()}

    def g_step(self, fakes, clean):
        total, parts = self.generator_loss(fakes, clean)
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        return total.item(), parts

    def train_step(self, rain, clean):
        """One D^d -> D^s -> G update on a batch of ``(N, 3, H, W)`` tensors.

        Returns a dict of loss values; keys for skipped components are absent.
        """
        if rain.shape[0] < 1:
            raise PreconditionError("empty batch")
        m = self.models
        m.generator.train()
        with _component("generator"):
            fakes = [o.estimate for o in m.generator(rain)]
        report = {}
        if m.d_img is not None:
            report["d_img"] = self.d_img_step(fakes, clean)
        if m.d_seg is not None:
            report["d_seg"] = self.d_seg_step(fakes, clean)
        total, parts = self.g_step(fakes, clean)
        report.update(g_total=total, g_mae=parts["g_mae"], g_perceptual=parts["g_perceptual"])
        if m.d_img is not None:
            report["g_adv"] = parts["g_adv"]
        with torch.no_grad():
            report["psnr"] = psnr_torch(fakes[-1].detach(), clean)
        self.step_count += 1
        return report

    # -- data -----------------------------------------------------------------

    def _batches(self, pairs):
        """Yield ``(rain, clean)`` batches for one epoch, seeded by ``self.rng``."""
        t = self.cfg.train
        n_steps = t.steps_per_epoch or math.ceil(len(pairs) / t.batch_size)
        order = []
        for _ in range(n_steps):
            if len(order) < t.batch_size:
                order.extend(self.rng.permutation(len(pairs)).tolist())
            idx, order = order[:t.batch_size], order[t.batch_size:]
            rains, cleans = [], []
            for i in idx:
                p = pairs[i]
                if t.crop_size:
                    top, left = crop_window(p.rain.shape, t.crop_size, self.rng)
                    sl = np.s_[top:top + t.crop_size, left:left + t.crop_size]
                    rains.append(to_tensor(p.rain[sl]))
                    cleans.append(to_tensor(p.clean[sl]))
                else:
                    rains.append(to_tensor(p.rain))
                    cleans.append(to_tensor(p.clean))
            yield torch.stack(rains), torch.stack(cleans)

    # -- loop -----------------------------------------------------------------

    def fit(self, pairs, run_dir, epochs=None):
        """Train from ``self.epoch`` up to ``cfg.train.epochs`` (or ``epochs`` more).

        Writes ``loss_log.csv`` (appending on resume), ``config.yaml`` and
        ``checkpoint_eNNNN.pt`` files into ``run_dir``.
        """
        t = self.cfg.train
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        dump_config(self.cfg, run_dir / "config.yaml")
        log_path = run_dir / "loss_log.csv"
        new_log = not log_path.exists() or self.step_count == 0
        stop = t.epochs if epochs is None else min(t.epochs, self.epoch + epochs)
        with open(log_path, "w" if new_log else "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if new_log:
                writer.writeheader()
            while self.epoch < stop:
                lr = lr_schedule(self.epoch, t)
                self.set_lr(lr)
                for rain, clean in self._batches(pairs):
                    rep = self.train_step(rain, clean)
                    row = {k: "" for k in LOG_FIELDS}
                    row.update({k: repr(v) for k, v in rep.items()})
                    row.update(step=self.step_count, epoch=self.epoch, lr=repr(lr))
                    writer.writerow(row)
                fh.flush()
                self.epoch += 1
                if self.epoch % t.checkpoint_every == 0 or self.epoch == stop:
                    self.save_checkpoint(run_dir / f"checkpoint_e{self.epoch:04d}.pt")
        return run_dir

    # -- checkpoints ------------------------------------------------------------

    def save_checkpoint(self, path):
        return save_checkpoint(self, path)

    @classmethod
    def from_checkpoint(cls, path):
        return load_checkpoint(path)


def _manifest(trainer):
    return {"format_version": CHECKPOINT_VERSION, "config": to_dict(trainer.cfg),
            "seed": trainer.cfg.train.seed, "epoch": trainer.epoch, "step": trainer.step_count}


def save_checkpoint(trainer, path):
    """Atomically write parameters, optimizer states and RNG state to ``path``."""
    path = Path(path)
    blob = {
        "manifest": _manifest(trainer),
        "models": {k: m.state_dict() for k, m in trainer.models.components().items()},
        "backbone": trainer.models.backbone.state_dict(),
        "optimizers": {k: o.state_dict() for k, o in trainer.optimizers().items()},
        "rng": {"numpy": trainer.rng.bit_generator.state, "torch": torch.get_rng_state()},
    }
    buf = io.BytesIO()
    torch.save(blob, buf)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def read_checkpoint(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    version = blob.get("manifest", {}).get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {version}, this build reads version {CHECKPOINT_VERSION}")
    return blob


def load_checkpoint(path, overrides=None):
    """Rebuild a :class:`Trainer` (models, optimizers, RNG, counters) from ``path``."""
    blob = read_checkpoint(path)
    man = blob["manifest"]
    cfg = from_dict(RunConfig, man["config"])
    trainer = Trainer(cfg)
    comps = trainer.models.components()
    if set(comps) != set(blob["models"]):
        raise StateError(f"checkpoint components {sorted(blob['models'])} != model {sorted(comps)}")
    for k, m in comps.items():
        m.load_state_dict(blob["models"][k])
    trainer.models.backbone.load_state_dict(blob["backbone"])
    for k, o in trainer.optimizers().items():
        o.load_state_dict(blob["optimizers"][k])
    trainer.rng.bit_generator.state = blob["rng"]["numpy"]
    torch.set_rng_state(blob["rng"]["torch"])
    trainer.epoch, trainer.step_count = man["epoch"], man["step"]
    return trainer


def latest_checkpoint(run_dir):
    ckpts = sorted(Path(run_dir).glob("checkpoint_e*.pt"))
    return ckpts[-1] if ckpts else None
