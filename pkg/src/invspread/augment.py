"""The stochastic view generator: crop, grayscale, colour jitter, flip, normalise."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .errors import ContractError
from .imaging import grayscale, resize_bilinear

# per-channel moments of the CIFAR-10 training split, pixels scaled to [0, 1]
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

OPS = ("crop", "grayscale", "jitter", "flip")


@dataclass(frozen=True)
class AugmentConfig:
    enable_crop: bool = True
    enable_grayscale: bool = True
    enable_jitter: bool = True
    enable_flip: bool = True
    crop_area_range: tuple[float, float] = (0.2, 1.0)
    crop_aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    grayscale_prob: float = 0.1
    jitter_strengths: tuple[float, float, float] = (0.4, 0.4, 0.4)
    flip_prob: float = 0.5
    normalize_mean: tuple[float, float, float] = field(default=CIFAR_MEAN)
    normalize_std: tuple[float, float, float] = field(default=CIFAR_STD)

    def __post_init__(self):
        lo, hi = self.crop_area_range
        if not 0 < lo <= hi <= 1:
            raise ContractError(f"crop_area_range must satisfy 0 < low <= high <= 1, got {self.crop_area_range}")
        alo, ahi = self.crop_aspect_range
        if not 0 < alo <= ahi:
            raise ContractError(f"crop_aspect_range must satisfy 0 < low <= high, got {self.crop_aspect_range}")
        for name in ("grayscale_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"{name} must be a probability, got {p}")
        if any(s < 0 for s in self.jitter_strengths) or len(self.jitter_strengths) != 3:
            raise ContractError("jitter_strengths must be three non-negative reals")
        if len(self.normalize_mean) != 3 or len(self.normalize_std) != 3:
            raise ContractError("normalize_mean and normalize_std need one value per channel")
        if any(s <= 0 for s in self.normalize_std):
            raise ContractError("normalize_std must be positive per channel")

    def without(self, op: str) -> "AugmentConfig":
        """Copy with one operation switched off (``crop``, ``grayscale``, ``jitter``, ``flip``)."""
        if op not in OPS:
            raise ContractError(f"unknown augmentation {op!r}; expected one of {OPS}")
        return replace(self, **{f"enable_{op}": False})

    def disabled(self) -> "AugmentConfig":
        return replace(self, enable_crop=False, enable_grayscale=False, enable_jitter=False, enable_flip=False)

    @property
    def is_identity(self) -> bool:
        return not (self.enable_crop or self.enable_grayscale or self.enable_jitter or self.enable_flip)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def sample_crop_box(H: int, W: int, cfg: AugmentConfig, gen: np.random.Generator) -> tuple[int, int, int, int]:
    """Pick ``(top, left, height, width)`` for a random resized crop.

    Ten (area, aspect) draws are tried; if none fits, the largest centred
    region within the aspect range is used.
    """
    area = H * W
    log_lo, log_hi = math.log(cfg.crop_aspect_range[0]), math.log(cfg.crop_aspect_range[1])
    for _ in range(10):
        target = area * gen.uniform(*cfg.crop_area_range)
        aspect = math.exp(gen.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(gen.integers(0, H - h + 1))
            left = int(gen.integers(0, W - w + 1))
            return top, left, h, w
    ratio = W / H
    if ratio < cfg.crop_aspect_range[0]:
        w, h = W, int(round(W / cfg.crop_aspect_range[0]))
    elif ratio > cfg.crop_aspect_range[1]:
        h, w = H, int(round(H * cfg.crop_aspect_range[1]))
    else:
        h, w = H, W
    return (H - h) // 2, (W - w) // 2, h, w


def _jitter(img: np.ndarray, strengths, gen: np.random.Generator) -> np.ndarray:
    factors = [gen.uniform(max(0.0, 1.0 - s), 1.0 + s) for s in strengths]
    order = gen.permutation(3)
    for k in order:
        if strengths[k] == 0:
            continue
        f = factors[k]
        if k == 0:  # brightness
            img = img * f
        elif k == 1:  # contrast
            m = grayscale(img).mean()
            img = (img - m) * f + m
        else:  # saturation
            g = grayscale(img)
            img = g + (img - g) * f
        img = np.clip(img, 0.0, 1.0)
    return img


def normalize(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    mean = np.asarray(cfg.normalize_mean, dtype=np.float64)[:, None, None]
    std = np.asarray(cfg.normalize_std, dtype=np.float64)[:, None, None]
    return ((img - mean) / std).astype(np.float32)


def plain_view(pixels: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Scale uint8 pixels to [0, 1] and normalise; works on one image or a batch."""
    x = np.asarray(pixels, dtype=np.float64) / 255.0
    if x.ndim == 4:
        return np.stack([normalize(im, cfg) for im in x])
    return normalize(x, cfg)


def augment(pixels, cfg: AugmentConfig, sample_seed: int) -> np.ndarray:
    """One random view of a uint8 3×H×W image as a normalised float32 array.

    Each operation draws from its own stream derived from ``sample_seed``, so
    switching one operation off leaves the others' randomness unchanged.
    """
    pixels = getattr(pixels, "pixels", pixels)
    if pixels.ndim != 3 or pixels.shape[0] != 3:
        raise ContractError(f"expected a 3×H×W image, got {pixels.shape}")
    img = pixels.astype(np.float64) / 255.0
    _, H, W = img.shape
    if cfg.enable_crop:
        box = sample_crop_box(H, W, cfg, rngmod.stream(sample_seed, "crop"))
        img = resize_bilinear(img, H, W, box)
    if cfg.enable_grayscale and rngmod.stream(sample_seed, "grayscale").random() < cfg.grayscale_prob:
        img = np.repeat(grayscale(img), 3, axis=0)
    if cfg.enable_jitter:
        img = _jitter(img, cfg.jitter_strengths, rngmod.stream(sample_seed, "jitter"))
    if cfg.enable_flip and rngmod.stream(sample_seed, "flip").random() < cfg.flip_prob:
        img = img[:, :, ::-1]
    return normalize(img, cfg)


def build_pair(pixels, cfg: AugmentConfig, seed_a: int, seed_b: int) -> tuple[np.ndarray, np.ndarray]:
    """Two independent views of one instance (first and second Siamese branch)."""
    return augment(pixels, cfg, seed_a), augment(pixels, cfg, seed_b)


def augment_batch(pixels: np.ndarray, cfg: AugmentConfig, seeds) -> np.ndarray:
    if cfg.is_identity:
        return plain_view(pixels, cfg)
    return np.stack([augment(p, cfg, int(s)) for p, s in zip(pixels, seeds)])
