"""Training loop, checkpoint selection, evaluation and prediction."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .augment import AugmentConfig, eval_transform, train_transform
from .dataset import (
    EXPRESSIONS,
    DatasetIndex,
    FrameSample,
    SampleLoadError,
    class_statistics,
    class_weights,
    decode_image,
)
from .metrics import ConfusionMatrix, MetricsReport, accumulate, balanced_cross_entropy, build_report, merge
from .model import Checkpoint, ModelConfig, build_model, save_checkpoint

log = logging.getLogger(__name__)

WORKERS_ENV = "MULTIRES_FER_WORKERS"
MAX_UNREADABLE_FRACTION = 0.01


class TrainingDiverged(RuntimeError):
    pass


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    optimizer: str = "adam"
    learning_rate: float = 1e-2
    batch_size: int = 128
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_scheme: str = "inverse-frequency"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    selection_fraction: float = 0.1
    checkpoint_every: int = 1
    include_selection_in_report: bool = False
    workers: int = 0

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs is None or self.epochs < 1:
            raise ValueError("epochs must be set and >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.weight_scheme not in ("uniform", "inverse-frequency"):
            raise ValueError(f"unknown weight scheme {self.weight_scheme!r}")
        if not 0.0 < self.selection_fraction <= 1.0:
            raise ValueError("selection_fraction must be in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "augment" in d:
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        if "adam_betas" in d:
            d["adam_betas"] = tuple(float(b) for b in d["adam_betas"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        # JSON has no tuples; keep the dict stable across a save/load cycle
        return json.loads(json.dumps(d))


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values use TOML literal syntax."""
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form key=value")
        node = d
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(value.strip())
    return d


def load_config(path=None, overrides: Sequence[str] = ()) -> TrainConfig:
    d = {}
    if path is not None:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    return TrainConfig.from_dict(apply_overrides(d, overrides))


def resolve_workers(config_workers: int) -> int:
    env = os.environ.get(WORKERS_ENV)
    return int(env) if env else config_workers


def sample_rng(seed: int, epoch: int, position: int) -> np.random.Generator:
    # one stream per (epoch, sample) so results do not depend on worker count
    return np.random.default_rng([seed, 1, epoch, position])


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> List[List[int]]:
    order = np.random.default_rng([seed, 2, epoch]).permutation(n)
    return [order[i:i + batch_size].tolist() for i in range(0, n, batch_size)]


class TrainFrames(Dataset):
    def __init__(self, index: DatasetIndex, augment: AugmentConfig, seed: int, epoch: int):
        self.samples = index.valid_samples
        self.augment = augment
        self.seed = seed
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        s = self.samples[i]
        image = decode_image(s.image_path)
        x = train_transform(image, self.augment, sample_rng(self.seed, self.epoch, i))
        return torch.from_numpy(x.transpose(2, 0, 1).copy()), s.label


class EvalFrames(Dataset):
    """Deterministic frames; unreadable images come back as ``(zeros, -1)``."""

    def __init__(self, samples: Sequence[FrameSample], augment: AugmentConfig):
        self.samples = list(samples)
        self.augment = augment

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        s = self.samples[i]
        size = self.augment.crop_size
        try:
            if s.image_path is None:
                raise SampleLoadError("no image")
            x = eval_transform(decode_image(s.image_path), self.augment)
        except (SampleLoadError, OSError) as exc:
            log.warning("skipping %s/%s: %s", s.video_id, s.frame_index, exc)
            return torch.zeros(3, size, size), -1
        return torch.from_numpy(x.transpose(2, 0, 1).copy()), 0


def _loader(dataset, batches, workers):
    return DataLoader(dataset, batch_sampler=batches, num_workers=workers)


@torch.no_grad()
def predict_labels(model: torch.nn.Module, samples: Sequence[FrameSample], augment: AugmentConfig,
                   batch_size: int = 64, workers: int = 0) -> np.ndarray:
    """Argmax predictions in sample order; -1 where the image could not be read."""
    was_training = model.training
    model.eval()
    ds = EvalFrames(samples, augment)
    batches = [list(range(i, min(i + batch_size, len(ds)))) for i in range(0, len(ds), batch_size)]
    out = []
    for x, ok in _loader(ds, batches, workers):
        pred = model(x).argmax(dim=1).numpy()
        out.append(np.where(ok.numpy() < 0, -1, pred))
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_confusion(model, index: DatasetIndex, augment: AugmentConfig, batch_size: int = 64,
                       shards: int = 1, workers: int = 0) -> ConfusionMatrix:
    samples = index.valid_samples
    if not samples:
        raise EvaluationError(f"{index.split}: nothing to evaluate")
    k = getattr(getattr(model, "fc", None), "out_features", len(EXPRESSIONS))
    parts = []
    n_bad = 0
    for shard in np.array_split(np.arange(len(samples)), shards):
        shard_samples = [samples[i] for i in shard]
        preds = predict_labels(model, shard_samples, augment, batch_size, workers)
        labels = np.array([s.label for s in shard_samples], dtype=np.int64)
        ok = preds >= 0
        n_bad += int((~ok).sum())
        parts.append(accumulate(ConfusionMatrix.empty(k), preds[ok], labels[ok]))
    if n_bad:
        frac = n_bad / len(samples)
        log.warning("%s: %d of %d samples unreadable (%.2f%%)", index.split, n_bad, len(samples), 100 * frac)
        if frac > MAX_UNREADABLE_FRACTION:
            raise EvaluationError(f"{index.split}: {n_bad}/{len(samples)} samples unreadable, above 1% limit")
    return merge(parts)


def evaluate(model, index: DatasetIndex, augment: AugmentConfig, batch_size: int = 64,
             shards: int = 1, workers: int = 0) -> MetricsReport:
    return build_report(evaluate_confusion(model, index, augment, batch_size, shards, workers))


def select_model(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    """Highest selection-set challenge score; the earliest epoch wins ties."""
    if not checkpoints:
        raise ValueError("no checkpoints to select from")
    best = None
    for ckpt in sorted(checkpoints, key=lambda c: c.epoch):
        if ckpt.metrics is None:
            raise ValueError(f"checkpoint {ckpt.path} has no selection metrics")
        if best is None or ckpt.metrics.challenge_score > best.metrics.challenge_score:
            best = ckpt
    return best


class _JsonLog:
    def __init__(self, path: Optional[Path]):
        self.fh = open(path, "w") if path else None

    def write(self, record: dict):
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def train(config: TrainConfig, train_index: DatasetIndex, selection_index: DatasetIndex, out_dir,
          extra_metadata: Optional[dict] = None) -> List[Checkpoint]:
    """Fit the model and write ``ckpt_epoch_<N>`` directories plus ``train_log.jsonl``.

    Checkpoints are written every ``checkpoint_every`` epochs and after the
    last epoch, each carrying its metrics on ``selection_index``.
    """
    if len(train_index) == 0 or len(selection_index) == 0:
        raise ValueError("training and selection indexes must be non-empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = resolve_workers(config.workers)

    stats = class_statistics(train_index)
    weights = torch.tensor(class_weights(stats, config.weight_scheme).weights, dtype=torch.float32)
    log.info("class weights (%s): %s", config.weight_scheme, [round(float(w), 4) for w in weights])

    torch.manual_seed(config.seed)
    model = build_model(config.model)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_eps)

    resolved = config.to_dict()
    journal = _JsonLog(out / "train_log.jsonl")
    checkpoints = []
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            ds = TrainFrames(train_index, config.augment, config.seed, epoch)
            batches = epoch_batches(len(ds), config.batch_size, config.seed, epoch)
            correct = seen = 0
            loss_sum = 0.0
            for x, y in _loader(ds, batches, workers):
                step += 1
                logits = model(x)
                loss = balanced_cross_entropy(logits, y, weights)
                value = loss.detach().item()
                if not math.isfinite(value):
                    journal.write({"step": step, "epoch": epoch, "loss": str(value), "diverged": True})
                    raise TrainingDiverged(f"non-finite loss {value} at step {step} (epoch {epoch})")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                journal.write({"step": step, "epoch": epoch, "loss": value})
                correct += int((logits.argmax(1) == y).sum())
                seen += len(y)
                loss_sum += value * len(y)
            log.info("epoch %d: loss %.4f, train acc %.4f", epoch, loss_sum / seen, correct / seen)

            if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
                report = evaluate(model, selection_index, config.augment, config.batch_size, workers=workers)
                journal.write({"epoch": epoch, "train_accuracy": correct / seen, "train_loss": loss_sum / seen,
                               **report.to_dict()})
                log.info("epoch %d: selection score %.4f (acc %.4f, macro F1 %.4f)", epoch,
                         report.challenge_score, report.accuracy, report.macro_f1)
                meta = {"epoch": epoch, "seed": config.seed, "config": resolved,
                        "model": asdict(config.model), "metrics": report,
                        "train_accuracy": correct / seen, **(extra_metadata or {})}
                checkpoints.append(save_checkpoint(model, meta, out / f"ckpt_epoch_{epoch}"))
    finally:
        journal.close()
    return checkpoints


def predict(model, index: DatasetIndex, augment: AugmentConfig, out_dir, batch_size: int = 64,
            workers: int = 0) -> Path:
    """Write ``<video>.txt`` label files, ``predictions.csv`` and ``fallbacks.log``.

    Every frame from 0 to the last listed frame of a video gets a line. Frames
    without a decodable image take the label of the nearest decoded frame of
    the same video (earlier frame on ties) and are listed in the sidecar log.
    """
    if not index.samples:
        raise ValueError("empty index: nothing to predict")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write predictions to {out}: {exc}") from exc

    by_video: Dict[str, Dict[int, FrameSample]] = {}
    for s in index.samples:
        by_video.setdefault(s.video_id, {})[s.frame_index] = s
    readable = [s for frames in by_video.values() for s in frames.values()
                if s.image_path is not None and s.image_path.exists()]
    preds = predict_labels(model, readable, augment, batch_size, workers)

    decoded_by_video: Dict[str, Dict[int, int]] = {}
    for s, p in zip(readable, preds):
        if p >= 0:
            decoded_by_video.setdefault(s.video_id, {})[s.frame_index] = int(p)

    csv_rows = ["video_id,frame_index,label_int,label_name"]
    fallback_lines = []
    for video_id in sorted(by_video):
        decoded = decoded_by_video.get(video_id, {})
        have = sorted(decoded)
        labels = []
        for frame in range(max(by_video[video_id]) + 1):
            if frame in decoded:
                label = decoded[frame]
            elif have:
                nearest = min(have, key=lambda f: (abs(f - frame), f))
                label = decoded[nearest]
                fallback_lines.append(f"{video_id}\t{frame}\tfrom frame {nearest}")
            else:
                label = 0
                fallback_lines.append(f"{video_id}\t{frame}\tno decodable frame in video, default 0")
            labels.append(label)
            name = EXPRESSIONS[label] if label < len(EXPRESSIONS) else str(label)
            csv_rows.append(f"{video_id},{frame},{label},{name}")
        (out / f"{video_id}.txt").write_text("".join(f"{v}\n" for v in labels))
    (out / "predictions.csv").write_text("\n".join(csv_rows) + "\n")
    (out / "fallbacks.log").write_text("".join(line + "\n" for line in fallback_lines))
    return out
