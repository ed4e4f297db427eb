"""SE-ResNet backbones, pretrained-weight loading and checkpoint persistence.

Weights are stored framework-neutral: ``weights.bin`` holds the raw
little-endian tensor bytes back to back and ``manifest.json`` maps each
parameter name to its shape, dtype and byte offset.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .metrics import MetricsReport

log = logging.getLogger(__name__)

DEPTHS = ("resnet50", "resnet-small")
HEAD_PREFIX = "fc."
WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "manifest.json"
METADATA_FILE = "metadata.json"

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "float16": (torch.float16, "<f2"),
    "int64": (torch.int64, "<i8"),
    "int32": (torch.int32, "<i4"),
}
_TORCH_TO_NAME = {t: name for name, (t, _) in _DTYPES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth: str = "resnet50"
    se_reduction: int = 16
    num_classes: int = 7
    pretrained_weights_path: Optional[str] = None
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.depth not in DEPTHS:
            raise ValueError(f"unknown depth {self.depth!r}; expected one of {DEPTHS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.se_reduction < 1:
            raise ValueError("se_reduction must be positive")


def squeeze_excite(features: torch.Tensor, w1, b1, w2, b2) -> torch.Tensor:
    """Functional SE recalibration: ``x * sigmoid(W2 relu(W1 avgpool(x) + b1) + b2)``."""
    squeezed = features.mean(dim=(2, 3))
    gate = torch.sigmoid(nn.functional.linear(torch.relu(nn.functional.linear(squeezed, w1, b1)), w2, b2))
    return features * gate[:, :, None, None]


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels % reduction:
            warnings.warn(f"SE reduction {reduction} does not divide {channels} channels; using floor")
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(x.mean(dim=(2, 3))))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return squeeze_excite(x, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)


def _conv3x3(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


def _conv1x1(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 1, stride=stride, bias=False)


def _shortcut(cin, cout, stride):
    if stride == 1 and cin == cout:
        return nn.Identity()
    return nn.Sequential(_conv1x1(cin, cout, stride), nn.BatchNorm2d(cout))


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, planes, stride=1, se_reduction: Optional[int] = 16):
        super().__init__()
        cout = planes * self.expansion
        self.conv1 = _conv3x3(cin, planes, stride)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = _conv3x3(planes, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.se = SqueezeExcite(cout, se_reduction) if se_reduction else nn.Identity()
        self.downsample = _shortcut(cin, cout, stride)

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.se(self.bn2(self.conv2(out)))
        return torch.relu(out + self.downsample(x))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, planes, stride=1, se_reduction: Optional[int] = 16):
        super().__init__()
        cout = planes * self.expansion
        self.conv1 = _conv1x1(cin, planes)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = _conv3x3(planes, planes, stride)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = _conv1x1(planes, cout)
        self.bn3 = nn.BatchNorm2d(cout)
        self.se = SqueezeExcite(cout, se_reduction) if se_reduction else nn.Identity()
        self.downsample = _shortcut(cin, cout, stride)

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = torch.relu(self.bn2(self.conv2(out)))
        out = self.se(self.bn3(self.conv3(out)))
        return torch.relu(out + self.downsample(x))


_ARCHS = {
    # block, blocks per stage, stage widths, stem width, stem kernel
    "resnet50": (Bottleneck, (3, 4, 6, 3), (64, 128, 256, 512), 64, 7),
    "resnet-small": (BasicBlock, (2, 2, 2), (16, 32, 64), 16, 3),
}


class SEResNet(nn.Module):
    def __init__(self, depth="resnet50", num_classes=7, se_reduction: Optional[int] = 16):
        super().__init__()
        block, layers, widths, stem, kernel = _ARCHS[depth]
        self.conv1 = nn.Conv2d(3, stem, kernel, stride=2, padding=kernel // 2, bias=False)
        self.bn1 = nn.BatchNorm2d(stem)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        stages = []
        cin = stem
        for i, (n, planes) in enumerate(zip(layers, widths)):
            blocks = []
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(block(cin, planes, stride, se_reduction))
                cin = planes * block.expansion
            stages.append(nn.Sequential(*blocks))
        self.layers = nn.ModuleList(stages)
        self.fc = nn.Linear(cin, num_classes)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        reset_head(self)

    def features(self, x):
        x = self.maxpool(torch.relu(self.bn1(self.conv1(x))))
        for stage in self.layers:
            x = stage(x)
        return x.mean(dim=(2, 3))

    def forward(self, x):
        return self.fc(self.features(x))


def reset_head(model: SEResNet) -> None:
    nn.init.normal_(model.fc.weight, mean=0.0, std=0.01)
    nn.init.zeros_(model.fc.bias)


def build_model(config: ModelConfig, use_se: bool = True) -> SEResNet:
    """Build the network; pretrained weights are loaded when the config names a file."""
    model = SEResNet(config.depth, config.num_classes, config.se_reduction if use_se else None)
    if config.pretrained_weights_path:
        model, report = load_pretrained(model, config.pretrained_weights_path)
        log.info("pretrained weights: %d loaded, %d skipped", len(report.loaded), len(report.skipped))
    if config.freeze_backbone:
        for name, p in model.named_parameters():
            p.requires_grad = name.startswith(HEAD_PREFIX)
    return model


# -- raw tensor files -------------------------------------------------------

def write_tensors(tensors: Dict[str, torch.Tensor], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(directory / WEIGHTS_FILE, "wb") as fh:
        for name, t in tensors.items():
            t = t.detach().cpu().contiguous()
            if t.dtype not in _TORCH_TO_NAME:
                raise TypeError(f"unsupported dtype {t.dtype} for {name}")
            dtype = _TORCH_TO_NAME[t.dtype]
            data = t.numpy().astype(_DTYPES[dtype][1], copy=False).tobytes()
            fh.write(data)
            entries.append({"name": name, "shape": list(t.shape), "dtype": dtype, "offset": offset, "nbytes": len(data)})
            offset += len(data)
    manifest = {"format": "raw-le-v1", "total_bytes": offset, "tensors": entries}
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1) + "\n")


def read_tensors(directory) -> Dict[str, torch.Tensor]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    weights_path = directory / WEIGHTS_FILE
    if not manifest_path.is_file() or not weights_path.is_file():
        raise FileNotFoundError(f"{directory}: expected {WEIGHTS_FILE} and {MANIFEST_FILE}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{manifest_path}: corrupt manifest: {exc}") from exc
    blob = weights_path.read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(
            f"{weights_path}: size {len(blob)} bytes, manifest expects {manifest['total_bytes']} (truncated?)"
        )
    out = {}
    for e in manifest["tensors"]:
        torch_dtype, np_dtype = _DTYPES[e["dtype"]]
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{weights_path}: tensor {e['name']} runs past end of file")
        arr = np.frombuffer(blob, dtype=np_dtype, count=e["nbytes"] // np.dtype(np_dtype).itemsize, offset=e["offset"])
        out[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy()).to(torch_dtype)
    return out


# -- pretrained weights -------------------------------------------------------

@dataclass
class LoadReport:
    source: str
    loaded: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)

    @property
    def from_scratch(self) -> bool:
        return self.source == "from scratch"


def load_pretrained(model: SEResNet, weights_path, strict_head: bool = False) -> Tuple[SEResNet, LoadReport]:
    """Copy backbone tensors from a manifest directory into ``model``.

    The classification head is re-initialized unless ``strict_head`` is set,
    in which case it is loaded like any other tensor.
    """
    if weights_path is None:
        return model, LoadReport("from scratch")
    path = Path(weights_path)
    if not path.exists():
        raise FileNotFoundError(f"pretrained weights not found: {path}")
    source = read_tensors(path)
    report = LoadReport(str(path))
    state = model.state_dict()
    new_state = {}
    for name, target in state.items():
        is_head = name.startswith(HEAD_PREFIX)
        if is_head and not strict_head:
            report.skipped.append(name)
            continue
        if name not in source:
            raise CheckpointError(f"{path}: parameter {name} missing from weights file")
        if tuple(source[name].shape) != tuple(target.shape):
            raise CheckpointError(
                f"{path}: shape mismatch for {name}: file {tuple(source[name].shape)} vs model {tuple(target.shape)}"
            )
        new_state[name] = source[name].to(target.dtype)
        report.loaded.append(name)
    report.skipped.extend(n for n in source if n not in state)
    model.load_state_dict(new_state, strict=False)
    if not strict_head:
        reset_head(model)
    return model, report


# -- checkpoints ------------------------------------------------------------

def config_digest(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass(frozen=True)
class Checkpoint:
    path: Path
    epoch: int
    metrics: Optional[MetricsReport]
    config_digest: str
    seed: int


def save_checkpoint(model: SEResNet, metadata: dict, directory) -> Checkpoint:
    """Persist weights plus metadata.

    ``metadata`` must contain ``model`` (a ModelConfig dict) and ``config``
    (the resolved run config); the digest of ``config`` is added here.
    """
    directory = Path(directory)
    write_tensors(model.state_dict(), directory)
    meta = dict(metadata)
    meta["config_digest"] = config_digest(meta.get("config", {}))
    if isinstance(meta.get("metrics"), MetricsReport):
        meta["metrics"] = meta["metrics"].to_dict()
    (directory / METADATA_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    metrics = MetricsReport.from_dict(meta["metrics"]) if meta.get("metrics") else None
    return Checkpoint(directory, int(meta.get("epoch", 0)), metrics, meta["config_digest"], int(meta.get("seed", 0)))


def read_metadata(directory) -> dict:
    path = Path(directory) / METADATA_FILE
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    return json.loads(path.read_text())


def load_checkpoint(directory, model: Optional[SEResNet] = None, force: bool = False) -> Tuple[SEResNet, dict]:
    """Load a checkpoint directory; builds the model from metadata unless one is given.

    A given ``model`` must match the stored tensors exactly. A digest mismatch
    between metadata and its config raises unless ``force`` is set.
    """
    directory = Path(directory)
    meta = read_metadata(directory)
    expected = config_digest(meta.get("config", {}))
    if meta.get("config_digest") != expected:
        msg = f"{directory}: config digest mismatch (stored {meta.get('config_digest')}, computed {expected})"
        if not force:
            raise CheckpointError(msg + "; pass force=True to load anyway")
        warnings.warn(msg)
    tensors = read_tensors(directory)
    if model is None:
        cfg = dict(meta["model"])
        cfg["pretrained_weights_path"] = None
        model = build_model(ModelConfig(**cfg))
    state = model.state_dict()
    for name, t in tensors.items():
        if name in state and tuple(state[name].shape) != tuple(t.shape):
            raise CheckpointError(f"{directory}: shape mismatch for {name}: {tuple(t.shape)} vs {tuple(state[name].shape)}")
    try:
        model.load_state_dict(tensors, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{directory}: {exc}") from exc
    return model, meta


def model_config_dict(config: ModelConfig) -> dict:
    return asdict(config)
