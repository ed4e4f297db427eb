"""Per-frame expression annotations, sample indexes and class statistics.

On-disk layout::

    <annotation_dir>/<split>/<video_id>.txt     one integer per line, line n = frame n
    <image_root>/<video_id>/<frame:05d>.jpg     (or .png)

Labels are 0..6 in the order of ``EXPRESSIONS``; -1 marks an unannotated frame.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

NUM_CLASSES = 7
INVALID = -1
SPLITS = ("train", "validation", "test")
IMAGE_EXTENSIONS = (".jpg", ".png")


class ExpressionLabel(IntEnum):
    NEUTRAL = 0
    ANGER = 1
    DISGUST = 2
    FEAR = 3
    HAPPINESS = 4
    SADNESS = 5
    SURPRISE = 6

    @property
    def display_name(self) -> str:
        return self.name.capitalize()


EXPRESSIONS: Tuple[str, ...] = tuple(label.display_name for label in ExpressionLabel)


class AnnotationError(ValueError):
    """Malformed annotation file or layout."""


class SampleLoadError(OSError):
    """An image could not be decoded."""


@dataclass(frozen=True)
class FrameSample:
    video_id: str
    frame_index: int
    image_path: Optional[Path]
    label: int  # 0..6 or INVALID
    excluded: Optional[str] = None  # reason, None when usable

    @property
    def valid(self) -> bool:
        return self.excluded is None


@dataclass(frozen=True)
class DatasetIndex:
    split: str
    samples: Tuple[FrameSample, ...]
    class_counts: Tuple[int, ...] = field(init=False)

    def __post_init__(self) -> None:
        counts = [0] * NUM_CLASSES
        for s in self.samples:
            if s.valid:
                counts[s.label] += 1
        object.__setattr__(self, "class_counts", tuple(counts))
        object.__setattr__(self, "_valid", tuple(s for s in self.samples if s.valid))

    @property
    def valid_samples(self) -> Tuple[FrameSample, ...]:
        return self._valid  # type: ignore[attr-defined]

    def __len__(self) -> int:
        return len(self.valid_samples)

    @property
    def num_excluded(self) -> int:
        return len(self.samples) - len(self.valid_samples)

    def without(self, other: "DatasetIndex") -> "DatasetIndex":
        """Copy of this index with every sample of ``other`` removed."""
        drop = {(s.video_id, s.frame_index) for s in other.samples}
        kept = tuple(s for s in self.samples if (s.video_id, s.frame_index) not in drop)
        return DatasetIndex(self.split, kept)


@dataclass(frozen=True)
class ClassStats:
    counts: Tuple[int, ...]
    percentages: Tuple[float, ...]
    total: int


@dataclass(frozen=True)
class ClassWeights:
    weights: Tuple[float, ...]
    scheme: str


def parse_annotation_file(path) -> List[Tuple[int, int]]:
    """Return ``[(frame_index, label)]`` where label is 0..6 or ``INVALID``.

    Blank lines are not allowed in the middle of a file since they would shift
    the frame numbering; trailing blank lines are ignored.
    """
    path = Path(path)
    lines = path.read_text().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise AnnotationError(f"{path}: empty annotation file")
    frames = []
    for i, raw in enumerate(lines):
        text = raw.strip()
        try:
            value = int(text)
        except ValueError:
            raise AnnotationError(f"{path}:{i + 1}: not an integer: {raw!r}") from None
        if not INVALID <= value < NUM_CLASSES:
            raise AnnotationError(f"{path}:{i + 1}: label {value} outside -1..6")
        frames.append((i, value))
    return frames


def _find_image(video_dir: Path, listing: set, frame_index: int) -> Optional[Path]:
    stem = f"{frame_index:05d}"
    for ext in IMAGE_EXTENSIONS:
        if stem + ext in listing:
            return video_dir / (stem + ext)
    return None


def build_index(annotation_dir, image_root, split: str) -> DatasetIndex:
    """Index every annotated frame of ``split``.

    With ``image_root=None`` no image lookup happens (useful for statistics on
    annotations alone). Otherwise frames whose image is missing are kept in the
    index but excluded, with a warning.
    """
    split_dir = Path(annotation_dir) / split
    if not split_dir.is_dir():
        raise AnnotationError(f"annotation directory not found: {split_dir}")
    files = sorted(split_dir.glob("*.txt"))
    samples = []
    n_missing = 0
    for ann in files:
        video_id = ann.stem
        frames = parse_annotation_file(ann)
        video_dir = listing = None
        if image_root is not None:
            video_dir = Path(image_root) / video_id
            listing = set(os.listdir(video_dir)) if video_dir.is_dir() else set()
        for frame_index, label in frames:
            image_path = None
            reason = "unannotated" if label == INVALID else None
            if video_dir is not None:
                image_path = _find_image(video_dir, listing, frame_index)
                if image_path is None:
                    image_path = video_dir / f"{frame_index:05d}.jpg"
                    if reason is None:
                        reason = "missing image"
                        n_missing += 1
            samples.append(FrameSample(video_id, frame_index, image_path, label, reason))
    if n_missing:
        log.warning("%s: %d annotated frames have no image file and were excluded", split, n_missing)
    index = DatasetIndex(split, tuple(samples))
    if len(index) == 0:
        raise AnnotationError(f"{split_dir}: no valid samples")
    return index


def index_from_images(image_root, split: str = "test") -> DatasetIndex:
    """Unlabelled index over every ``<video>/<frame>.<ext>`` image under ``image_root``.

    Samples carry the INVALID label but are not excluded, so they can be fed to
    prediction. Frame gaps are left for the predictor to fill.
    """
    root = Path(image_root)
    if not root.is_dir():
        raise AnnotationError(f"image directory not found: {root}")
    samples = []
    for video_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for img in sorted(video_dir.iterdir()):
            if img.suffix.lower() in IMAGE_EXTENSIONS and img.stem.isdigit():
                samples.append(FrameSample(video_dir.name, int(img.stem), img, INVALID))
    if not samples:
        raise AnnotationError(f"{root}: no frame images found")
    return _UnlabelledIndex(split, tuple(samples))


class _UnlabelledIndex(DatasetIndex):
    # All samples are usable even though none carries a label.
    def __post_init__(self) -> None:
        object.__setattr__(self, "class_counts", (0,) * NUM_CLASSES)
        object.__setattr__(self, "_valid", self.samples)


def class_statistics(index_or_counts) -> ClassStats:
    """Counts, one-decimal percentages and total, laid out like Table 1 rows."""
    counts = index_or_counts.class_counts if isinstance(index_or_counts, DatasetIndex) else index_or_counts
    counts = tuple(int(c) for c in counts)
    total = sum(counts)
    if total <= 0:
        raise ValueError("class statistics need at least one sample")
    percentages = tuple(round(100.0 * c / total, 1) for c in counts)
    return ClassStats(counts, percentages, total)


def class_weights(stats: ClassStats, scheme: str = "inverse-frequency") -> ClassWeights:
    k = len(stats.counts)
    if scheme == "uniform":
        return ClassWeights((1.0,) * k, scheme)
    if scheme != "inverse-frequency":
        raise ValueError(f"unknown weight scheme {scheme!r}")
    if any(c == 0 for c in stats.counts):
        empty = [EXPRESSIONS[i] if k == NUM_CLASSES else str(i) for i, c in enumerate(stats.counts) if c == 0]
        raise ValueError(
            f"classes {empty} have no samples; use the uniform scheme or smooth the counts"
        )
    return ClassWeights(tuple(stats.total / (k * c) for c in stats.counts), scheme)


def stratified_subsample(index: DatasetIndex, fraction: float, seed: int) -> DatasetIndex:
    """Per class, keep ``max(1, round(fraction * n_c))`` random valid samples.

    The result preserves the original sample order.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    by_class: List[List[int]] = [[] for _ in range(NUM_CLASSES)]
    for pos, s in enumerate(index.valid_samples):
        by_class[s.label].append(pos)
    chosen = []
    for members in by_class:
        if not members:
            continue
        n = max(1, round(fraction * len(members)))
        chosen.extend(rng.choice(members, size=n, replace=False).tolist())
    valid = index.valid_samples
    return DatasetIndex(index.split, tuple(valid[p] for p in sorted(chosen)))


def decode_image(path) -> np.ndarray:
    """Decode to an RGB uint8 array of shape (H, W, 3); grayscale is replicated."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise SampleLoadError(f"cannot decode image {path}: {exc}") from exc


def load_sample(index: DatasetIndex, i: int) -> Tuple[np.ndarray, int]:
    valid = index.valid_samples
    if not 0 <= i < len(valid):
        raise IndexError(f"sample {i} out of range for {len(valid)} valid samples")
    s = valid[i]
    if s.image_path is None:
        raise SampleLoadError(f"sample {s.video_id}/{s.frame_index} has no image path")
    return decode_image(s.image_path), s.label


def counts_table(rows: Sequence[Tuple[str, ClassStats]]) -> str:
    """Fixed-width text table with a counts row and a percentage row per split."""
    width = max(10, max(len(n) for n in EXPRESSIONS) + 2)
    head = " " * 12 + "".join(f"{n:>{width}}" for n in EXPRESSIONS) + f"{'Total':>{width}}"
    out = [head]
    for name, st in rows:
        out.append(f"{name:<12}" + "".join(f"{c:>{width}d}" for c in st.counts) + f"{st.total:>{width}d}")
        out.append(f"{'(%)':<12}" + "".join(f"{p:>{width}.1f}" for p in st.percentages) + f"{100.0:>{width}.1f}")
    return "\n".join(out) + "\n"


def counts_csv(rows: Sequence[Tuple[str, ClassStats]]) -> str:
    lines = ["split,row," + ",".join(EXPRESSIONS) + ",total"]
    for name, st in rows:
        lines.append(f"{name},count," + ",".join(str(c) for c in st.counts) + f",{st.total}")
        lines.append(f"{name},percent," + ",".join(f"{p:.1f}" for p in st.percentages) + ",100.0")
    return "\n".join(lines) + "\n"
