"""Conditioning maps fed between generator stages.

The attention rain map marks where the previous estimate still differs from
the observation.  Segmentation maps come from a pluggable segmenter: a small
colour k-means stand-in by default, or label images produced elsewhere.
"""
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError, IngestionError, PreconditionError

RAIN_MAP_GAIN = 5.0


def attention_rain_map(observation, estimate, gain=RAIN_MAP_GAIN):
    """Gained, clamped channel-mean of ``|observation - estimate|``.

    Both inputs are ``(N, C, H, W)``; the result is ``(N, 1, H, W)`` in [0, 1].
    The map is conditioning only, so it is computed without autograd.
    """
    if observation.shape != estimate.shape:
        raise PreconditionError(
            f"rain map inputs differ in shape: {tuple(observation.shape)} vs {tuple(estimate.shape)}")
    with torch.no_grad():
        diff = (observation - estimate).abs().mean(dim=1, keepdim=True)
        return (gain * diff).clamp_(0.0, 1.0)


def resize_nearest(maps, size):
    if tuple(maps.shape[-2:]) == tuple(size):
        return maps
    return F.interpolate(maps, size=tuple(size), mode="nearest")


class ToySegmenter:
    """Colour k-means segmenter with soft, differentiable scores.

    Centroids start from a fixed palette drawn from ``seed`` and are refined by
    a few Lloyd iterations on each image (without autograd).  Scores are a
    softmax over negative squared colour distances; clusters left empty by the
    hard assignment receive zero mass, so a flat image maps to one category.
    """

    kind = "toy"

    def __init__(self, num_categories=5, seed=0, iterations=5, temperature=0.01):
        if num_categories < 2:
            raise ConfigurationError("a segmenter needs at least 2 categories")
        self.num_categories = num_categories
        self.seed = seed
        self.iterations = iterations
        self.temperature = temperature
        self.palette = self._palette(num_categories, seed)

    @staticmethod
    def _palette(k, seed, min_dist=0.3):
        rng = np.random.default_rng(seed)
        chosen = []
        while len(chosen) < k:
            c = rng.random(3)
            # relax the spacing if the colour cube gets crowded
            if all(np.linalg.norm(c - p) >= min_dist for p in chosen):
                chosen.append(c)
            else:
                min_dist *= 0.99
        return torch.tensor(np.stack(chosen), dtype=torch.float64)

    def _fit(self, pixels):
        # pixels: (P, 3) float64
        centroids = self.palette.clone()
        for _ in range(self.iterations):
            assign = torch.cdist(pixels, centroids).argmin(dim=1)
            for j in range(self.num_categories):
                members = pixels[assign == j]
                if len(members):
                    centroids[j] = members.mean(dim=0)
        assign = torch.cdist(pixels, centroids).argmin(dim=1)
        occupied = torch.bincount(assign, minlength=self.num_categories) > 0
        return centroids, occupied

    def __call__(self, images):
        if images.dim() != 4 or images.shape[1] != 3:
            raise PreconditionError(f"segmenter expects (N, 3, H, W) images, got {tuple(images.shape)}")
        n, _, h, w = images.shape
        out = []
        for img in images:
            pix = img.reshape(3, -1).t()
            with torch.no_grad():
                centroids, occupied = self._fit(pix.detach().double())
            centroids = centroids.to(img.dtype)
            d2 = ((pix[:, None, :] - centroids[None]) ** 2).sum(-1)
            logits = (-d2 / self.temperature).masked_fill(~occupied[None], float("-inf"))
            out.append(torch.softmax(logits, dim=1).t().reshape(self.num_categories, h, w))
        return torch.stack(out)


def import_label_map(path, num_categories, size=None):
    """Read a single-channel 8-bit label image as one-hot scores ``(K, H, W)``."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"label map not found: {path}")
    labels = np.asarray(Image.open(path))
    if labels.ndim != 2:
        raise IngestionError(f"label map {path} must be single-channel, got shape {labels.shape}")
    bad = np.unique(labels[(labels < 0) | (labels >= num_categories)])
    if bad.size:
        raise IngestionError(
            f"label map {path} has values outside [0, {num_categories}): {bad.tolist()}")
    if size is not None and tuple(labels.shape) != tuple(size):
        raise IngestionError(f"label map {path} is {labels.shape}, expected {tuple(size)}")
    onehot = F.one_hot(torch.from_numpy(labels.astype(np.int64)), num_categories)
    return onehot.permute(2, 0, 1).float()


class LabelMapSegmenter:
    """Serves precomputed label maps, e.g. from an external segmentation network.

    ``maps`` is a list of one-hot ``(K, H, W)`` tensors, one per batch element,
    or a single tensor broadcast over the batch.
    """

    kind = "external-import"

    def __init__(self, maps, num_categories):
        if num_categories < 2:
            raise ConfigurationError("a segmenter needs at least 2 categories")
        self.num_categories = num_categories
        self.maps = maps

    @classmethod
    def from_files(cls, paths, num_categories):
        return cls([import_label_map(p, num_categories) for p in paths], num_categories)

    def __call__(self, images):
        n, _, h, w = images.shape
        maps = self.maps if isinstance(self.maps, list) else [self.maps] * n
        if len(maps) != n:
            raise IngestionError(f"{len(maps)} label maps for a batch of {n}")
        for m in maps:
            if tuple(m.shape[-2:]) != (h, w):
                raise IngestionError(f"label map size {tuple(m.shape[-2:])} does not match image {h}x{w}")
        return torch.stack(maps).to(images.dtype)


def init_priors(observation, segmenter):
    """Stage-0 maps: a flat 0.5 rain map and the segmentation of the observation."""
    n, _, h, w = observation.shape
    rain = observation.new_full((n, 1, h, w), 0.5)
    with torch.no_grad():
        seg = segmenter(observation)
    return rain, seg
