"""Small wide-residual sign classifier on 64x64 crops, used to exercise the metrics end to end."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import NUM_CLASSES, BBox, DatasetManifest, TaxonomyError, read_image, resize
from .metrics import FeatureIndex

CROP_SIZE = 64


class WideBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.short = nn.Conv2d(cin, cout, 1, stride, bias=False) if (cin != cout or stride != 1) else nn.Identity()

    def forward(self, x):
        h = F.relu(self.bn1(x))
        out = self.conv2(F.relu(self.bn2(self.conv1(h))))
        return out + self.short(h if not isinstance(self.short, nn.Identity) else x)


class ToyClassifier(nn.Module):
    def __init__(self, num_classes: int = NUM_CLASSES, widths: Sequence[int] = (16, 32, 64)):
        super().__init__()
        self.num_classes = num_classes
        self.stem = nn.Conv2d(3, widths[0], 3, 1, 1, bias=False)
        blocks, cin = [], widths[0]
        for w in widths:
            blocks.append(WideBlock(cin, w, 2))
            cin = w
        self.blocks = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(cin)
        self.feature_dim = cin
        self.head = nn.Linear(cin, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.bn(self.blocks(self.stem(x)))).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


def weights_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _nchw(images: np.ndarray) -> torch.Tensor:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1:] != (CROP_SIZE, CROP_SIZE, 3):
        raise ValueError(f"expected N x {CROP_SIZE} x {CROP_SIZE} x 3 crops, got {images.shape}")
    return torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()


@dataclass
class CropSet:
    images: np.ndarray  # N x 64 x 64 x 3
    labels: np.ndarray  # N

    def __len__(self) -> int:
        return len(self.labels)

    @staticmethod
    def concat(sets: Iterable[CropSet]) -> CropSet:
        sets = [s for s in sets if len(s)]
        return CropSet(np.concatenate([s.images for s in sets]), np.concatenate([s.labels for s in sets]))


def crop_sign(frame: np.ndarray, box: BBox) -> np.ndarray:
    return resize(frame[box.slices()], CROP_SIZE, CROP_SIZE)


def crops_from_manifest(manifest: DatasetManifest, image_root: str | Path | None = None) -> CropSet:
    images, labels = [], []
    for rec in manifest.frames:
        if not rec.annotations:
            continue
        path = Path(image_root) / rec.image_path if image_root is not None else Path(rec.image_path)
        frame = read_image(path)
        for ann in rec.annotations:
            images.append(crop_sign(frame, ann.bbox))
            labels.append(ann.class_id)
    if not images:
        return CropSet(np.zeros((0, CROP_SIZE, CROP_SIZE, 3), np.float32), np.zeros(0, np.int64))
    return CropSet(np.stack(images).astype(np.float32), np.array(labels, dtype=np.int64))


def train_toy_classifier(data: CropSet, num_classes: int = NUM_CLASSES, steps: int = 500, seed: int = 0,
                         batch: int = 32, lr: float = 2e-3, widths: Sequence[int] = (16, 32, 64),
                         k: int = 1) -> tuple[ToyClassifier, FeatureIndex]:
    """Train with Adam on random minibatches; returns the model and an index of its training features."""
    if len(data) == 0:
        raise ValueError("no training crops")
    labels = np.asarray(data.labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= num_classes:
        bad = int(labels[(labels < 0) | (labels >= num_classes)][0])
        raise TaxonomyError(f"class {bad} outside the {num_classes}-way head", bad)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = ToyClassifier(num_classes, widths)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    x_all, y_all = _nchw(data.images), torch.from_numpy(labels)
    model.train()
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(labels), size=min(batch, len(labels))))
        loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    model.eval()
    return model, FeatureIndex(extract_features(model, data.images), labels, k)


def _batched(model_fn, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    x = _nchw(images)
    with torch.no_grad():
        return torch.cat([model_fn(x[i:i + chunk]) for i in range(0, len(x), chunk)]).numpy()


def extract_features(model: ToyClassifier, images: np.ndarray) -> np.ndarray:
    model.eval()
    return _batched(model.features, images)


def predict_logits(model: ToyClassifier, images: np.ndarray, allowed: Sequence[int] | None = None) -> np.ndarray:
    """Logits; with ``allowed`` the remaining classes are masked to ``-inf``."""
    model.eval()
    logits = _batched(model, images)
    if allowed is not None:
        mask = np.full(logits.shape[1], -np.inf)
        mask[list(allowed)] = 0.0
        logits = logits + mask
    return logits


def predict(model: ToyClassifier, images: np.ndarray, allowed: Sequence[int] | None = None) -> np.ndarray:
    return predict_logits(model, images, allowed).argmax(axis=1)


def softmax_head(model: ToyClassifier, allowed: Sequence[int] | None = None):
    """Feature -> logits callable for routed classification."""
    def head(features: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            logits = model.head(torch.as_tensor(features, dtype=torch.float32)).numpy()
        if allowed is not None:
            mask = np.full(logits.shape[1], -np.inf)
            mask[list(allowed)] = 0.0
            logits = logits + mask
        return logits
    return head
