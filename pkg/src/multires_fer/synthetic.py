"""Procedural 7-class stand-in for the cropped-aligned expression frames.

Each class has its own base hue and grating orientation/frequency. Hue jitter
is wide enough that neighbouring classes overlap in mean colour, so neither
the colour nor the texture cue alone separates every pair cleanly.
"""

from __future__ import annotations

import colorsys
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import NUM_CLASSES

IMAGE_SIZE = 112
FRAMES_PER_VIDEO = 32
HUE_JITTER = 0.09
NOISE_STD = 0.08

# cycles per image and orientation per class
_FREQUENCIES = (4.0, 6.0, 8.0, 5.0, 7.0, 9.0, 3.0)
_ORIENTATIONS = tuple(c * math.pi / NUM_CLASSES for c in range(NUM_CLASSES))


def synthetic_image(label: int, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    hue = (label / NUM_CLASSES + rng.uniform(-HUE_JITTER, HUE_JITTER)) % 1.0
    sat = rng.uniform(0.35, 0.65)
    val = rng.uniform(0.45, 0.85)
    base = np.array(colorsys.hsv_to_rgb(hue, sat, val))

    yy, xx = np.mgrid[0:size, 0:size] / size
    theta = _ORIENTATIONS[label] + rng.normal(0.0, 0.05)
    freq = _FREQUENCIES[label] * rng.uniform(0.9, 1.1)
    phase = rng.uniform(0, 2 * math.pi)
    grating = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    amplitude = rng.uniform(0.25, 0.4)

    img = base[None, None, :] * (1.0 + amplitude * grating[..., None])
    img += rng.normal(0.0, NOISE_STD, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def generate_synthetic(out_dir, per_class: int, seed: int = 0, splits=("train", "validation")) -> Path:
    """Write ``per_class`` images of every class for each split.

    Layout: ``<out>/annotations/<split>/<video>.txt`` and
    ``<out>/images/<video>/<frame:05d>.jpg``. Returns ``out_dir``.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    out = Path(out_dir)
    for split_no, split in enumerate(splits):
        rng = np.random.default_rng([seed, split_no])
        labels = rng.permutation(np.repeat(np.arange(NUM_CLASSES), per_class))
        ann_dir = out / "annotations" / split
        ann_dir.mkdir(parents=True, exist_ok=True)
        prefix = "val" if split == "validation" else split
        for v, start in enumerate(range(0, len(labels), FRAMES_PER_VIDEO)):
            video_id = f"{prefix}_{v:03d}"
            chunk = labels[start:start + FRAMES_PER_VIDEO]
            img_dir = out / "images" / video_id
            img_dir.mkdir(parents=True, exist_ok=True)
            for frame, label in enumerate(chunk):
                Image.fromarray(synthetic_image(int(label), rng)).save(img_dir / f"{frame:05d}.jpg", quality=95)
            (ann_dir / f"{video_id}.txt").write_text("".join(f"{int(x)}\n" for x in chunk))
    return out
