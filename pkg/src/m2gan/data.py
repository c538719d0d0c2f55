"""Synthetic raindrop degradation, paired-dataset manifests and cropping.

Images are ``(H, W, 3)`` float arrays in [0, 1] on this side of the package;
:func:`to_tensor` converts to the ``(3, H, W)`` layout the networks use.
"""
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, PreconditionError, ValidationError

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class RainSynthesisConfig:
    drop_count: tuple = (6, 14)          # inclusive range
    drop_radius: tuple = (3.0, 9.0)      # semi-axis range in pixels
    aspect: tuple = (0.7, 1.3)           # vertical / horizontal semi-axis ratio
    lens_scale: float = 1.6              # drops show a wider, flipped field of view
    displacement_gain: float = 4.0       # shift of the refracted field, pixels
    blur_sigma: tuple = (0.0, 1.2)
    flow_streak_prob: float = 0.3        # per drop, chance of a trailing flow
    flow_length: tuple = (8, 24)
    brightness: tuple = (0.0, 0.08)      # additive lift inside drops
    seed: int = 0

    def __post_init__(self):
        for name in ("drop_count", "drop_radius", "aspect", "blur_sigma", "flow_length", "brightness"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigurationError(f"{name} must be a non-empty non-negative range, got {(lo, hi)}")
            setattr(self, name, (lo, hi))
        if not 0 <= self.flow_streak_prob <= 1:
            raise ConfigurationError("flow_streak_prob must lie in [0, 1]")
        if self.lens_scale <= 0 or self.displacement_gain < 0:
            raise ConfigurationError("lens_scale must be positive and displacement_gain non-negative")


@dataclass
class DatasetPair:
    rain: np.ndarray
    clean: np.ndarray
    id: str

    def __post_init__(self):
        if self.rain.shape != self.clean.shape:
            raise PreconditionError(
                f"pair {self.id}: rain {self.rain.shape} and clean {self.clean.shape} differ")


@dataclass
class DatasetManifest:
    root: Path
    ids: list
    split: str = "train"

    @property
    def n_tr(self):
        return len(self.ids)

    def rain_path(self, pid):
        return self.root / "rain" / f"{pid}.png"

    def gt_path(self, pid):
        return self.root / "gt" / f"{pid}.png"

    def load_pair(self, pid):
        return DatasetPair(load_image(self.rain_path(pid)), load_image(self.gt_path(pid)), pid)

    def load_pairs(self):
        return [self.load_pair(pid) for pid in self.ids]


# -- image io ---------------------------------------------------------------

def load_image(path):
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float32) / 255.0


def save_image(path, img):
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def to_tensor(img):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(img, dtype=np.float32).transpose(2, 0, 1)))


def to_image(t):
    return t.detach().cpu().numpy().transpose(1, 2, 0)


# -- synthesis ----------------------------------------------------------------

def ellipse_mask(shape, center, radii):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = center
    ry, rx = radii
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def refracted_coords(shape, center, lens_scale, shift):
    """Source coordinates seen through a drop centred at ``center``.

    The drop behaves like a small lens: it flips the scene vertically about
    its centre, widens the field of view by ``lens_scale`` and displaces it by
    ``shift = (dy, dx)``.  Coordinates are rounded to the nearest pixel and
    reflected at the image border.
    """
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = center
    sy = cy - lens_scale * (yy - cy) + shift[0]
    sx = cx + lens_scale * (xx - cx) + shift[1]
    return _reflect(np.rint(sy).astype(int), h), _reflect(np.rint(sx).astype(int), w)


def _reflect(idx, n):
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _streak_mask(shape, start, length, width, angle):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = np.cos(angle), np.sin(angle)
    ry, rx = yy - start[0], xx - start[1]
    along = ry * dy + rx * dx
    across = np.abs(-ry * dx + rx * dy)
    return (along >= 0) & (along <= length) & (across <= width)


@dataclass
class Drop:
    center: tuple
    radii: tuple            # (vertical, horizontal) semi-axes
    shift: tuple            # displacement of the refracted field
    blur_sigma: float
    lift: float
    streak: dict = None     # {"length", "width", "angle"} when the drop trails a flow


def sample_drops(shape, cfg):
    """Draw drop geometry for an image of ``shape`` from ``cfg.seed``."""
    h, w = shape[:2]
    if 2 * cfg.drop_radius[1] * max(cfg.aspect[1], 1.0) > min(h, w):
        raise ConfigurationError(
            f"drop radius {cfg.drop_radius[1]} too large for a {h}x{w} image")
    rng = np.random.default_rng(cfg.seed)
    drops = []
    for _ in range(int(rng.integers(cfg.drop_count[0], cfg.drop_count[1] + 1))):
        rx = rng.uniform(*cfg.drop_radius)
        ry = rx * rng.uniform(*cfg.aspect)
        center = (rng.uniform(0, h - 1), rng.uniform(0, w - 1))
        theta = rng.uniform(0, 2 * np.pi)
        shift = (cfg.displacement_gain * np.sin(theta), cfg.displacement_gain * np.cos(theta))
        drop = Drop(center, (ry, rx), shift, rng.uniform(*cfg.blur_sigma), rng.uniform(*cfg.brightness))
        if rng.random() < cfg.flow_streak_prob:
            # mostly downwards
            drop.streak = {"length": rng.uniform(*cfg.flow_length),
                           "width": max(1.0, 0.4 * rx), "angle": rng.normal(0.0, 0.25)}
        drops.append(drop)
    return drops


def render_drops(clean, drops, lens_scale):
    """Composite ``drops`` onto ``clean``; returns ``(rain, union_mask)``.

    Inside a drop the refracted field of the clean image (see
    :func:`refracted_coords`) is optionally Gaussian-blurred and lifted.  A
    trailing flow shows the clean image smeared vertically.  Pixels outside
    every mask are copied unchanged.
    """
    clean = np.asarray(clean, dtype=np.float32)
    h, w = clean.shape[:2]
    out = clean.copy()
    union = np.zeros((h, w), dtype=bool)
    for d in drops:
        mask = ellipse_mask((h, w), d.center, d.radii)
        sy, sx = refracted_coords((h, w), d.center, lens_scale, d.shift)
        field_img = clean[sy, sx]
        if d.blur_sigma > 0:
            field_img = ndimage.gaussian_filter(field_img, sigma=(d.blur_sigma, d.blur_sigma, 0),
                                                mode="reflect")
        out[mask] = np.clip(field_img[mask] + d.lift, 0.0, 1.0)
        union |= mask
        if d.streak:
            s = d.streak
            streak = _streak_mask((h, w), d.center, s["length"], s["width"], s["angle"]) & ~mask
            smeared = ndimage.uniform_filter1d(clean, size=max(3, int(s["length"] // 2)), axis=0,
                                               mode="reflect")
            out[streak] = np.clip(smeared[streak] + d.lift + 0.04, 0.0, 1.0)
            union |= streak
    return out, union


def synthesize_raindrops(clean, cfg, return_mask=False):
    """Degrade a clean ``(H, W, 3)`` image with raindrops drawn from ``cfg``."""
    out, union = render_drops(clean, sample_drops(np.shape(clean), cfg), cfg.lens_scale)
    return (out, union) if return_mask else out


def procedural_scene(h, w, seed):
    """A deterministic synthetic 'clean' image: sky/ground gradient plus shapes."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / np.array([max(h - 1, 1), max(w - 1, 1)])[:, None, None]
    top, bottom = rng.random(3), rng.random(3)
    img = top * (1 - yy[..., None]) + bottom * yy[..., None]
    for _ in range(rng.integers(3, 7)):
        color = rng.random(3)
        y0, x0 = rng.random(2)
        y1, x1 = y0 + rng.uniform(0.1, 0.5), x0 + rng.uniform(0.1, 0.5)
        if rng.random() < 0.5:
            m = (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)
        else:
            m = (yy - y0) ** 2 + (xx - x0) ** 2 <= rng.uniform(0.01, 0.06)
        img[m] = color
    freq = rng.uniform(4, 12)
    img = img + 0.05 * np.sin(2 * np.pi * freq * xx)[..., None]
    return np.clip(img, 0, 1).astype(np.float32)


def procedural_pairs(n, size, cfg=None):
    """``n`` square procedural scenes of side ``size`` with their raindrop versions.

    Pair ``i`` uses scene seed ``i`` and drop seed ``cfg.seed + i``.
    """
    cfg = cfg or RainSynthesisConfig()
    pairs = []
    for i in range(n):
        clean = procedural_scene(size, size, i)
        rain = synthesize_raindrops(clean, replace(cfg, seed=cfg.seed + i))
        pairs.append(DatasetPair(rain, clean, f"toy{i:03d}"))
    return pairs


# -- manifests ------------------------------------------------------------------

def _stems(directory):
    return {p.stem: p for p in sorted(Path(directory).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def save_manifest(manifest, root=None):
    root = Path(root or manifest.root)
    doc = {
        "format_version": MANIFEST_VERSION,
        "split": manifest.split,
        "n_pairs": manifest.n_tr,
        "pairs": [{"id": pid, "rain": f"rain/{pid}.png", "gt": f"gt/{pid}.png"} for pid in manifest.ids],
    }
    (root / MANIFEST_NAME).write_text(json.dumps(doc, indent=2) + "\n")
    return root / MANIFEST_NAME


def load_manifest(root_dir, split="train"):
    """Pair ``root/rain/<id>`` with ``root/gt/<id>``.

    If ``root/manifest.json`` exists it fixes the id order and split;
    otherwise ids are taken in sorted filename order.  Any id present on only
    one side raises :class:`ValidationError` listing the offenders.
    """
    root = Path(root_dir)
    for sub in ("rain", "gt"):
        if not (root / sub).is_dir():
            raise ValidationError(f"{root} has no {sub}/ subdirectory")
    rain, gt = _stems(root / "rain"), _stems(root / "gt")
    unmatched = sorted(set(rain) ^ set(gt))
    if unmatched:
        names = [(rain.get(i) or gt.get(i)).name for i in unmatched]
        raise ValidationError(f"unmatched files in {root}: {', '.join(names)}", names)
    mpath = root / MANIFEST_NAME
    if mpath.exists():
        doc = json.loads(mpath.read_text())
        if doc.get("format_version") != MANIFEST_VERSION:
            raise ValidationError(
                f"manifest version {doc.get('format_version')} != supported {MANIFEST_VERSION}")
        ids = [p["id"] for p in doc["pairs"]]
        missing = [i for i in ids if i not in rain]
        if missing:
            raise ValidationError(f"manifest lists missing pairs: {', '.join(missing)}", missing)
        split = doc.get("split", split)
    else:
        ids = sorted(rain)
    if not ids:
        raise ValidationError(f"no image pairs found under {root}")
    return DatasetManifest(root=root, ids=ids, split=split)


def crop_window(shape, size, rng):
    h, w = shape[:2]
    if size > h or size > w:
        raise PreconditionError(f"crop size {size} exceeds image {h}x{w}")
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def random_crop_pair(pair, size, seed):
    """Crop the same ``size`` x ``size`` window out of both images."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    top, left = crop_window(pair.rain.shape, size, rng)
    sl = np.s_[top:top + size, left:left + size]
    return DatasetPair(pair.rain[sl], pair.clean[sl], pair.id)
