"""Training and evaluation image transforms with multi-resolution degradation.

Images travel as ``(H, W, 3)`` uint8 RGB arrays until the final step, which
returns a normalized ``float32`` array of shape ``(crop, crop, 3)``. Every
random decision is drawn from an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LUMA = (0.299, 0.587, 0.114)

_RESAMPLE = {"bilinear": Image.Resampling.BILINEAR}


@dataclass(frozen=True)
class ResolutionPolicy:
    apply_probability: float = 0.5
    min_resolution: int = 8
    max_resolution: int = 256

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must be in [0, 1]")
        if not 1 <= self.min_resolution <= self.max_resolution:
            raise ValueError("need 1 <= min_resolution <= max_resolution")


@dataclass(frozen=True)
class AugmentConfig:
    resize_shorter_side: int = 256
    crop_size: int = 224
    grayscale_probability: float = 0.2
    channel_mean: Tuple[float, float, float] = IMAGENET_MEAN
    channel_std: Tuple[float, float, float] = IMAGENET_STD
    resolution_policy: ResolutionPolicy = field(default_factory=ResolutionPolicy)
    interpolation: str = "bilinear"

    def __post_init__(self):
        if self.crop_size > self.resize_shorter_side:
            raise ValueError("crop_size must not exceed resize_shorter_side")
        if len(self.channel_std) != 3 or any(s <= 0 for s in self.channel_std):
            raise ValueError("channel_std must be three positive values")
        if len(self.channel_mean) != 3:
            raise ValueError("channel_mean must have three values")
        if not 0.0 <= self.grayscale_probability <= 1.0:
            raise ValueError("grayscale_probability must be in [0, 1]")
        if self.interpolation not in _RESAMPLE:
            raise ValueError(f"unsupported interpolation {self.interpolation!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        if "resolution_policy" in d:
            d["resolution_policy"] = ResolutionPolicy(**d["resolution_policy"])
        for key in ("channel_mean", "channel_std"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def draw_resolution(policy: ResolutionPolicy, rng: np.random.Generator) -> Optional[int]:
    """Two draws: whether to degrade at all, then the target resolution.

    Returns ``None`` when the image keeps its resolution.
    """
    if rng.random() >= policy.apply_probability:
        return None
    return int(rng.integers(policy.min_resolution, policy.max_resolution + 1))


def _resize(image: np.ndarray, width: int, height: int, interpolation: str = "bilinear") -> np.ndarray:
    out = Image.fromarray(image).resize((width, height), _RESAMPLE[interpolation])
    return np.asarray(out, dtype=np.uint8)


def _shorter_side_size(h: int, w: int, target: int) -> Tuple[int, int]:
    # (height, width) with min(height, width) == target and aspect ratio kept
    if h <= w:
        return target, max(target, round(w * target / h))
    return max(target, round(h * target / w)), target


def resize_shorter_side(image: np.ndarray, target: int, interpolation: str = "bilinear") -> np.ndarray:
    h, w = image.shape[:2]
    if min(h, w) == target:
        return image
    nh, nw = _shorter_side_size(h, w, target)
    return _resize(image, nw, nh, interpolation)


def downscale_upscale(image: np.ndarray, target_resolution: int, interpolation: str = "bilinear") -> np.ndarray:
    """Shrink so the shorter side is ``target_resolution``, then resize back.

    A target at or above the shorter side returns the input untouched.
    """
    if target_resolution < 1:
        raise ValueError("target_resolution must be >= 1")
    h, w = image.shape[:2]
    if target_resolution >= min(h, w):
        return image
    nh, nw = _shorter_side_size(h, w, target_resolution)
    small = _resize(image, nw, nh, interpolation)
    return _resize(small, w, h, interpolation)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    rgb = image.astype(np.float64)
    y = LUMA[0] * rgb[..., 0] + LUMA[1] * rgb[..., 1] + LUMA[2] * rgb[..., 2]
    y = np.clip(np.rint(y), 0, 255).astype(np.uint8)
    return np.repeat(y[..., None], 3, axis=-1)


def random_grayscale(image: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < p:
        return to_grayscale(image)
    return image


def channel_normalize(image: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    if np.any(std <= 0):
        raise ValueError("std must be positive")
    return ((np.asarray(image, dtype=np.float32) - mean) / std).astype(np.float32)


def _scale_and_normalize(image: np.ndarray, config: AugmentConfig) -> np.ndarray:
    return channel_normalize(image.astype(np.float32) / 255.0, config.channel_mean, config.channel_std)


def crop(image: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    return image[top:top + size, left:left + size]


def center_offsets(h: int, w: int, size: int) -> Tuple[int, int]:
    return (h - size) // 2, (w - size) // 2


def train_augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random part of the training pipeline; returns the uint8 crop before normalization."""
    img = resize_shorter_side(image, config.resize_shorter_side, config.interpolation)
    h, w = img.shape[:2]
    size = config.crop_size
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    img = crop(img, top, left, size)
    resolution = draw_resolution(config.resolution_policy, rng)
    if resolution is not None:
        img = downscale_upscale(img, resolution, config.interpolation)
    return random_grayscale(img, config.grayscale_probability, rng)


def train_transform(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return _scale_and_normalize(train_augment(image, config, rng), config)


def eval_transform(image: np.ndarray, config: AugmentConfig) -> np.ndarray:
    img = resize_shorter_side(image, config.resize_shorter_side, config.interpolation)
    top, left = center_offsets(img.shape[0], img.shape[1], config.crop_size)
    return _scale_and_normalize(crop(img, top, left, config.crop_size), config)


def dump_augment_pairs(images, config: AugmentConfig, out_dir, seed: int = 0) -> int:
    """Write ``<i>_before.png`` / ``<i>_after.png`` pairs for visual inspection."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = 0
    for i, image in enumerate(images):
        Image.fromarray(image).save(out / f"{i:04d}_before.png")
        Image.fromarray(train_augment(image, config, rng)).save(out / f"{i:04d}_after.png")
        n += 1
    return n
