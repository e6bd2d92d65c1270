"""Frozen-feature evaluation: weighted kNN, multi-scale kNN, probing and PCA."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from satdino.augment import Normalization, resize, to_float_image
from satdino.exceptions import ConfigurationError, DataError
from satdino.vit import VisionTransformer

KNN_K = 20
KNN_TEMPERATURE = 0.07
MULTISCALE = (1.0, 0.5, 0.25, 0.125)

FEATURE_MAGIC = b"SDFM"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIQQ")


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    labels: np.ndarray
    scale_tag: float = 1.0
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rows.ndim != 2:
            raise ValueError(f"feature rows must be 2-D, got shape {self.rows.shape}")
        if len(self.labels) != len(self.rows):
            raise ValueError("one label per feature row required")
        if not np.isfinite(self.rows).all():
            raise DataError("feature matrix contains non-finite values")

    @property
    def shape(self):
        return self.rows.shape


def save_features(fm: FeatureMatrix, path) -> Path:
    """Little-endian: magic, version u32, n u64, d u64, float32 rows, int32 labels."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, d = fm.rows.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, n, d))
        fh.write(fm.rows.astype("<f4").tobytes())
        fh.write(fm.labels.astype("<i4").tobytes())
    return path


def load_features(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise DataError(f"{path}: truncated feature file")
    magic, version, n, d = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
        raise DataError(f"{path}: not a version-{FEATURE_VERSION} feature file")
    off = _FEATURE_HEADER.size
    if len(data) != off + 4 * n * d + 4 * n:
        raise DataError(f"{path}: size does not match header ({n} x {d})")
    rows = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    labels = np.frombuffer(data, dtype="<i4", count=n, offset=off + 4 * n * d)
    return FeatureMatrix(rows.copy(), labels.astype(np.int64))


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# image preparation and feature extraction
# --------------------------------------------------------------------------

def degrade(img: torch.Tensor, scale: float) -> torch.Tensor:
    """Downsample a CxHxW image to ``scale`` times its resolution."""
    if not 0 < scale <= 1:
        raise ConfigurationError(f"scale must lie in (0, 1], got {scale}")
    if scale == 1.0:
        return img
    h, w = img.shape[-2:]
    return resize(img, (max(1, round(h * scale)), max(1, round(w * scale))))


def prepare_images(images: Sequence[np.ndarray], input_size: int, scale: float = 1.0,
                   norm: Optional[Normalization] = None) -> torch.Tensor:
    norm = norm or Normalization()
    out = []
    for img in images:
        t = to_float_image(img)
        t = resize(degrade(t, scale), input_size)
        out.append(norm.apply(t))
    return torch.stack(out)


@torch.no_grad()
def extract_features(backbone: VisionTransformer, images: Sequence[np.ndarray],
                     labels: Sequence[int], input_size: int, scale_tag: float = 1.0,
                     norm: Optional[Normalization] = None, batch_size: int = 128,
                     source: Optional[dict] = None) -> FeatureMatrix:
    """Class-token features of ``images`` after optional resolution degradation."""
    if len(images) != len(labels):
        raise DataError("images and labels differ in length")
    was_training = backbone.training
    backbone.eval()
    dtype = next(backbone.parameters()).dtype
    rows = []
    try:
        for start in range(0, len(images), batch_size):
            batch = prepare_images(images[start:start + batch_size], input_size, scale_tag, norm)
            rows.append(backbone(batch.to(dtype)).cls_embedding.float().numpy())
    finally:
        backbone.train(was_training)
    d = backbone.cfg.embed_dim
    matrix = np.concatenate(rows) if rows else np.zeros((0, d), dtype=np.float32)
    return FeatureMatrix(matrix, np.asarray(labels), scale_tag, dict(source or {}))


# --------------------------------------------------------------------------
# kNN
# --------------------------------------------------------------------------

@dataclass
class KNNResult:
    predictions: np.ndarray
    scores: np.ndarray
    top1: Optional[float] = None
    top5: Optional[float] = None
    top5_flagged: bool = False


def _l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean([labels[i] in order[i] for i in range(len(labels))]))


def knn_scores(train_rows, train_labels, test_rows, k: int = KNN_K,
               temperature: float = KNN_TEMPERATURE, n_classes: Optional[int] = None,
               chunk: int = 1024) -> np.ndarray:
    """Class scores from temperature-weighted cosine votes of the k nearest rows.

    Neighbour ties are broken in favour of the lower training index.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(train_rows) == 0:
        raise ConfigurationError("empty training set for kNN")
    if k <= 0 or k > len(train_rows):
        raise ConfigurationError(f"k must lie in [1, {len(train_rows)}], got {k}")
    if temperature <= 0:
        raise ConfigurationError("kNN temperature must be positive")
    train_n = _l2_normalize(train_rows)
    test_n = _l2_normalize(test_rows)
    if train_n.shape[1] != test_n.shape[1]:
        raise ValueError("train and test feature dimensions differ")
    n_classes = int(n_classes or train_labels.max() + 1)
    scores = np.zeros((len(test_n), n_classes))
    for start in range(0, len(test_n), chunk):
        sims = test_n[start:start + chunk] @ train_n.T
        idx = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        top_sims = np.take_along_axis(sims, idx, axis=1)
        weights = np.exp(top_sims / temperature)
        block = scores[start:start + chunk]
        for j in range(k):
            np.add.at(block, (np.arange(len(block)), train_labels[idx[:, j]]), weights[:, j])
    return scores


def knn_classify(train: FeatureMatrix, test: FeatureMatrix, k: int = KNN_K,
                 temperature: float = KNN_TEMPERATURE,
                 n_classes: Optional[int] = None) -> KNNResult:
    if train.rows.shape[1] != test.rows.shape[1]:
        raise ValueError("train and test feature dimensions differ")
    n_classes = int(n_classes or max(train.labels.max(), test.labels.max()) + 1)
    scores = knn_scores(train.rows, train.labels, test.rows, k, temperature, n_classes)
    preds = np.argmax(scores, axis=1)
    top1 = float(np.mean(preds == test.labels)) if len(test.labels) else 0.0
    flagged = n_classes < 5
    top5 = 1.0 if flagged else topk_accuracy(scores, test.labels, 5)
    return KNNResult(preds, scores, top1, top5, flagged)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    protocol: str
    k: Optional[int] = None
    per_scale: dict = field(default_factory=dict)
    average: Optional[float] = None
    top1: Optional[float] = None
    top5: Optional[float] = None
    provenance: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    PROTOCOLS = ("knn", "knn-multiscale", "linear-probe", "fine-tune")

    def __post_init__(self):
        if self.protocol not in self.PROTOCOLS:
            raise ConfigurationError(f"unknown protocol {self.protocol!r}")
        if self.per_scale and self.average is None:
            self.average = float(np.mean(list(self.per_scale.values())))

    def to_text(self) -> str:
        lines = [f"protocol: {self.protocol}"]
        if self.k is not None:
            lines.append(f"k: {self.k}")
        for scale, acc in self.per_scale.items():
            lines.append(f"scale {scale!r}: {acc!r}")
        for name in ("average", "top1", "top5"):
            value = getattr(self, name)
            if value is not None:
                lines.append(f"{name}: {value!r}")
        for flag in self.flags:
            lines.append(f"flag: {flag}")
        for key in sorted(self.provenance):
            lines.append(f"provenance.{key}: {self.provenance[key]}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["protocol", "k", "scale", "top1", "top5"])
        for scale, acc in self.per_scale.items():
            writer.writerow([self.protocol, self.k, repr(scale), repr(acc), ""])
        if self.per_scale:
            writer.writerow([self.protocol, self.k, "average", repr(self.average), ""])
        else:
            writer.writerow([self.protocol, self.k, "", repr(self.top1),
                             "" if self.top5 is None else repr(self.top5)])
        return buf.getvalue()

    def save(self, directory, stem: Optional[str] = None) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or self.protocol
        txt = directory / f"{stem}.txt"
        csv_path = directory / f"{stem}.csv"
        txt.write_text(self.to_text(), encoding="utf-8")
        csv_path.write_text(self.to_csv(), encoding="utf-8")
        return txt, csv_path


def multiscale_eval(backbone: VisionTransformer, train_images, train_labels,
                    test_images, test_labels, scales: Sequence[float] = MULTISCALE,
                    k: int = KNN_K, input_size: int = 64,
                    norm: Optional[Normalization] = None,
                    temperature: float = KNN_TEMPERATURE,
                    provenance: Optional[dict] = None) -> EvalReport:
    """kNN accuracy with both splits degraded to each scale, plus the mean.

    The neighbour index is rebuilt from degraded training images at each scale.
    """
    scales = tuple(float(s) for s in scales)
    if not scales:
        raise ConfigurationError("at least one scale is required")
    for s in scales:
        if not 0 < s <= 1:
            raise ConfigurationError(f"scale must lie in (0, 1], got {s}")
    n_classes = int(max(np.max(train_labels), np.max(test_labels)) + 1)
    per_scale = {}
    for s in scales:
        train = extract_features(backbone, train_images, train_labels, input_size, s, norm)
        test = extract_features(backbone, test_images, test_labels, input_size, s, norm)
        per_scale[s] = knn_classify(train, test, k, temperature, n_classes).top1
    protocol = "knn" if scales == (1.0,) else "knn-multiscale"
    return EvalReport(protocol, k=k, per_scale=per_scale,
                      average=float(np.mean(list(per_scale.values()))),
                      provenance=dict(provenance or {}))


# --------------------------------------------------------------------------
# linear probe / fine-tune
# --------------------------------------------------------------------------

def _check_classes(train_labels) -> int:
    classes = np.unique(np.asarray(train_labels))
    if len(classes) < 2:
        raise ConfigurationError("probing needs at least two classes")
    return int(classes.max() + 1)


def _accuracy(logits: torch.Tensor, labels: torch.Tensor) -> tuple[float, float, bool]:
    n_classes = logits.shape[1]
    top1 = float((logits.argmax(1) == labels).double().mean())
    if n_classes < 5:
        return top1, 1.0, True
    top5 = topk_accuracy(logits.numpy(), labels.numpy(), 5)
    return top1, top5, False


def train_linear_classifier(train_x: torch.Tensor, train_y: torch.Tensor, n_classes: int,
                            epochs: int, lr: float, batch_size: int = 64,
                            weight_decay: float = 0.0, seed: int = 0) -> nn.Linear:
    torch.manual_seed(seed)
    layer = nn.Linear(train_x.shape[1], n_classes).to(train_x.dtype)
    opt = torch.optim.AdamW(layer.parameters(), lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        order = torch.randperm(len(train_x), generator=gen)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = F.cross_entropy(layer(train_x[idx]), train_y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return layer


def linear_probe_features(train: FeatureMatrix, val: FeatureMatrix, epochs: int = 25,
                          lr: float = 1e-3, batch_size: int = 64, seed: int = 0,
                          provenance: Optional[dict] = None) -> EvalReport:
    """Train one linear layer on cached class-token features."""
    n_classes = max(_check_classes(train.labels), int(val.labels.max()) + 1)
    x = torch.from_numpy(train.rows)
    y = torch.from_numpy(train.labels)
    layer = train_linear_classifier(x, y, n_classes, epochs, lr, batch_size, seed=seed)
    with torch.no_grad():
        logits = layer(torch.from_numpy(val.rows))
    top1, top5, flagged = _accuracy(logits, torch.from_numpy(val.labels))
    prov = {"epochs": epochs, "lr": lr, **(provenance or {})}
    return EvalReport("linear-probe", top1=top1, top5=top5, provenance=prov,
                      flags=["top5 reported as 1.0 (<5 classes)"] if flagged else [])


def linear_probe(backbone: VisionTransformer, train_images, train_labels, val_images,
                 val_labels, epochs: int = 25, lr: float = 1e-3, input_size: int = 64,
                 norm: Optional[Normalization] = None, batch_size: int = 64, seed: int = 0,
                 provenance: Optional[dict] = None) -> EvalReport:
    """Linear probe on the frozen backbone; its parameters are never updated."""
    _check_classes(train_labels)
    before = parameter_checksum(backbone)
    train = extract_features(backbone, train_images, train_labels, input_size, 1.0, norm)
    val = extract_features(backbone, val_images, val_labels, input_size, 1.0, norm)
    report = linear_probe_features(train, val, epochs, lr, batch_size, seed, provenance)
    if parameter_checksum(backbone) != before:
        raise RuntimeError("backbone parameters changed during linear probing")
    return report


class _Classifier(nn.Module):
    def __init__(self, backbone: VisionTransformer, n_classes: int):
        super().__init__()
        self.backbone = backbone
        self.fc = nn.Linear(backbone.cfg.embed_dim, n_classes)

    def forward(self, x):
        return self.fc(self.backbone(x).cls_embedding)


def fine_tune(backbone: VisionTransformer, train_images, train_labels, val_images, val_labels,
              epochs: int = 25, lr: float = 1e-5, input_size: int = 64,
              norm: Optional[Normalization] = None, batch_size: int = 64, seed: int = 0,
              weight_decay: float = 0.05, provenance: Optional[dict] = None) -> EvalReport:
    """Train the backbone and a linear layer end to end (updates ``backbone`` in place)."""
    n_classes = max(_check_classes(train_labels), int(np.max(val_labels)) + 1)
    torch.manual_seed(seed)
    model = _Classifier(backbone, n_classes).to(next(backbone.parameters()).dtype)
    dtype = next(backbone.parameters()).dtype
    x = prepare_images(train_images, input_size, 1.0, norm).to(dtype)
    y = torch.as_tensor(np.asarray(train_labels), dtype=torch.long)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    model.train()
    for _ in range(epochs):
        order = torch.randperm(len(x), generator=gen)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        xv = prepare_images(val_images, input_size, 1.0, norm).to(dtype)
        logits = torch.cat([model(xv[i:i + 256]) for i in range(0, len(xv), 256)]).float()
    top1, top5, flagged = _accuracy(logits, torch.as_tensor(np.asarray(val_labels)))
    prov = {"epochs": epochs, "lr": lr, **(provenance or {})}
    return EvalReport("fine-tune", top1=top1, top5=top5, provenance=prov,
                      flags=["top5 reported as 1.0 (<5 classes)"] if flagged else [])


# --------------------------------------------------------------------------
# PCA of patch embeddings
# --------------------------------------------------------------------------

def pca_components(x: np.ndarray, n_components: int = 3):
    """Return (scores, components, mean) of the top principal directions."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < n_components:
        raise ValueError(f"need at least {n_components} rows, got {x.shape[0]}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:n_components]
    return centered @ components.T, components, mean


def pca_patch_projection(patch_embeddings, grid: tuple[int, int], n_components: int = 3):
    """Project patches onto their top principal directions, scaled to [0, 1] per channel."""
    x = np.asarray(patch_embeddings, dtype=np.float64)
    gh, gw = grid
    if x.shape[0] != gh * gw:
        raise ValueError(f"{x.shape[0]} patches do not fill a {gh}x{gw} grid")
    if np.allclose(x, x[0]):
        warnings.warn("degenerate patch embeddings; returning a zero projection")
        return np.zeros((gh, gw, n_components))
    scores, _, _ = pca_components(x, n_components)
    lo, hi = scores.min(axis=0), scores.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return ((scores - lo) / span).reshape(gh, gw, n_components)


def copy_backbone(backbone: VisionTransformer) -> VisionTransformer:
    return copy.deepcopy(backbone)
