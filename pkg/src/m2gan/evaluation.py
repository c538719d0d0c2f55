"""PSNR, SSIM and FID, plus directory-level evaluation reports.

Metric inputs are ``(H, W, C)`` arrays in [0, 1] (``C`` of 1 or 3).
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .data import _stems, load_image, to_tensor
from .errors import PreconditionError, ValidationError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
LUMA = np.array([0.299, 0.587, 0.114])


def _same_shape(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise PreconditionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    a, b = _same_shape(a, b)
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def to_luma(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[-1] == 1:
        return img[..., 0]
    return img @ LUMA


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def ssim(a, b):
    """Mean SSIM over every full 11x11 Gaussian window of the luma planes."""
    a, b = _same_shape(a, b)
    x, y = to_luma(a), to_luma(b)
    if min(x.shape) < SSIM_WINDOW:
        raise PreconditionError(f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()

    def filt(img):
        # separable 'valid' correlation
        img = ndimage.correlate1d(img, g, axis=0, mode="constant")
        img = ndimage.correlate1d(img, g, axis=1, mode="constant")
        r = SSIM_WINDOW // 2
        return img[r:img.shape[0] - r, r:img.shape[1] - r]

    mx, my = filt(x), filt(y)
    vx = filt(x * x) - mx ** 2
    vy = filt(y * y) - my ** 2
    cxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)
    den = (mx ** 2 + my ** 2 + SSIM_C1) * (vx + vy + SSIM_C2)
    return float(np.mean(num / den))


@dataclass
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int = 0


class RandomEmbedder(nn.Module):
    """Fixed-seed random CNN mapping an image to a ``dim``-vector (global pooled)."""

    def __init__(self, dim=64, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = [3, 16, 32, dim]
        self.convs = nn.ModuleList()
        for cin, cout in zip(widths, widths[1:]):
            c = nn.Conv2d(cin, cout, 3, padding=1)
            with torch.no_grad():
                c.weight.copy_(torch.randn(c.weight.shape, generator=gen) * (2.0 / (cin * 9)) ** 0.5)
                c.bias.copy_(0.1 * torch.randn(c.bias.shape, generator=gen))
            self.convs.append(c)
        self.dim = dim
        self.requires_grad_(False)

    def forward(self, x):
        for i, c in enumerate(self.convs):
            x = F.leaky_relu(c(x), 0.2)
            if i < len(self.convs) - 1:
                x = F.avg_pool2d(x, 2, ceil_mode=True)
        return x.mean(dim=(2, 3))

    def embed(self, img):
        with torch.no_grad():
            return self(to_tensor(img)[None]).double().numpy()[0]


def feature_stats(images, embedder):
    """Sample mean and (n-1 normalised) covariance of the embeddings."""
    images = list(images)
    if len(images) < 2:
        raise PreconditionError(f"feature statistics need at least 2 images, got {len(images)}")
    emb = embedder.embed if hasattr(embedder, "embed") else embedder
    feats = np.stack([np.atleast_1d(np.asarray(emb(img), dtype=np.float64)) for img in images])
    return stats_from_features(feats)


def stats_from_features(feats):
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    mu = feats.mean(axis=0)
    sigma = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))
    return FeatureStats(mu=mu, sigma=(sigma + sigma.T) / 2, n=len(feats))


def _psd_sqrt(m, clamp=1e-8):
    w, v = np.linalg.eigh((m + m.T) / 2)
    w = np.where(w < clamp, np.maximum(w, 0.0), w)
    return (v * np.sqrt(w)) @ v.T


def fid(s1, s2):
    """Frechet distance between two Gaussians.

    ``Tr((S1 S2)^(1/2))`` is computed as ``Tr((A S2 A)^(1/2))`` with
    ``A = S1^(1/2)``, which keeps every square root symmetric PSD.
    """
    mu1, mu2 = np.atleast_1d(s1.mu), np.atleast_1d(s2.mu)
    c1, c2 = np.atleast_2d(s1.sigma), np.atleast_2d(s2.sigma)
    if mu1.shape != mu2.shape or c1.shape != c2.shape:
        raise PreconditionError(f"feature dimensions differ: {mu1.shape} vs {mu2.shape}")
    a = _psd_sqrt(c1)
    cross = np.trace(_psd_sqrt(a @ c2 @ a))
    val = float(np.sum((mu1 - mu2) ** 2) + np.trace(c1) + np.trace(c2) - 2 * cross)
    return max(val, 0.0)


@dataclass
class MetricReport:
    per_image: list = field(default_factory=list)   # dicts: id, psnr, ssim
    mean_psnr: float = float("nan")
    mean_ssim: float = float("nan")
    fid: float = None
    config: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def table(self):
        rows = [f"{'id':<24} {'PSNR (dB)':>10} {'SSIM':>8}"]
        rows += [f"{r['id']:<24} {r['psnr']:>10.4f} {r['ssim']:>8.4f}" for r in self.per_image]
        rows.append("-" * len(rows[0]))
        rows.append(f"{'mean':<24} {self.mean_psnr:>10.4f} {self.mean_ssim:>8.4f}")
        fid_txt = "n/a (fewer than 2 images)" if self.fid is None else f"{self.fid:.4f}"
        rows.append(f"FID: {fid_txt}")
        return "\n".join(rows)


def evaluate_pairs(pairs, embedder=None, config=None):
    """``pairs``: iterable of ``(id, pred, gt)`` arrays."""
    pairs = list(pairs)
    report = MetricReport(config=dict(config or {}))
    for pid, pred, gt in pairs:
        report.per_image.append({"id": pid, "psnr": psnr(pred, gt), "ssim": ssim(pred, gt)})
    if report.per_image:
        report.mean_psnr = float(np.mean([r["psnr"] for r in report.per_image]))
        report.mean_ssim = float(np.mean([r["ssim"] for r in report.per_image]))
    if len(pairs) >= 2:
        if embedder is None:
            embedder = RandomEmbedder()
        report.fid = fid(feature_stats([p for _, p, _ in pairs], embedder),
                         feature_stats([g for _, _, g in pairs], embedder))
    return report


def evaluate_dirs(pred_dir, gt_dir, embedder=None, out_dir=None):
    pred, gt = _stems(pred_dir), _stems(gt_dir)
    unmatched = sorted(set(pred) ^ set(gt))
    if unmatched:
        raise ValidationError(f"unmatched ids between {pred_dir} and {gt_dir}: {', '.join(unmatched)}",
                              unmatched)
    if not pred:
        raise ValidationError(f"no images in {pred_dir}")
    pairs = [(i, load_image(pred[i]), load_image(gt[i])) for i in sorted(pred)]
    report = evaluate_pairs(pairs, embedder,
                            config={"pred_dir": str(pred_dir), "gt_dir": str(gt_dir)})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json() + "\n")
        (out_dir / "report.txt").write_text(report.table() + "\n")
    return report


def psnr_torch(a, b):
    """Batch-mean PSNR of ``(N, C, H, W)`` tensors; used for training logs."""
    mse = ((a - b) ** 2).flatten(1).mean(1).clamp_min(1e-10)
    return float((10 * torch.log10(1.0 / mse)).mean())


__all__ = ["psnr", "ssim", "fid", "feature_stats", "stats_from_features", "FeatureStats",
           "MetricReport", "RandomEmbedder", "evaluate_dirs", "evaluate_pairs"]
