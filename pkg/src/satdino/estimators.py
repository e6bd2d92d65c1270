"""scikit-learn style wrappers around pretraining and frozen-feature evaluation."""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from satdino.augment import Normalization
from satdino.config import RunConfig
from satdino.data import GeoSample
from satdino.evaluation import (
    KNN_K,
    KNN_TEMPERATURE,
    extract_features,
    knn_scores,
    prepare_images,
    train_linear_classifier,
)
from satdino.exceptions import ConfigurationError, DataError


def check_images(X) -> list:
    """Validate a batch of H x W x 3 uint8 images; returns a list of arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        images = list(X)
    elif isinstance(X, (list, tuple)):
        images = [np.asarray(x) for x in X]
    else:
        raise DataError("expected an N x H x W x 3 array or a list of H x W x 3 arrays")
    if not images:
        raise DataError("no images given")
    for i, img in enumerate(images):
        if img.ndim != 3 or img.shape[2] != 3:
            raise DataError(f"image {i} has shape {img.shape}, expected H x W x 3")
        if img.dtype != np.uint8:
            raise DataError(f"image {i} has dtype {img.dtype}, expected uint8")
    return images


def check_gsd(gsd, n: int) -> np.ndarray:
    gsd = np.broadcast_to(np.asarray(gsd, dtype=np.float64), (n,)).copy()
    if not np.all(np.isfinite(gsd)) or np.any(gsd <= 0):
        raise DataError("gsd values must be finite and positive")
    return gsd


def check_features(X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"features must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("features contain non-finite values")
    if y is None:
        return X
    y = np.asarray(y)
    if y.shape != (len(X),):
        raise DataError("one label per feature row required")
    return X, y


class SatDINO(TransformerMixin, BaseEstimator):
    """Self-distillation pretraining; ``transform`` returns teacher class-token features.

    ``overrides`` holds dotted RunConfig keys applied on top of the named
    parameters, e.g. ``{"views.strategy": "random"}``.
    """

    def __init__(self, n_local=8, strategy="uniform", gamma=0.1, epochs=20, batch_size=64,
                 lr=1e-3, embed_dim=96, depth=4, heads=4, patch_size=8, global_out=64,
                 local_out=32, seed=0, overrides=None):
        self.n_local = n_local
        self.strategy = strategy
        self.gamma = gamma
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.patch_size = patch_size
        self.global_out = global_out
        self.local_out = local_out
        self.seed = seed
        self.overrides = overrides

    def make_config(self) -> RunConfig:
        cfg = RunConfig()
        cfg.update({
            "views.n_local": self.n_local, "views.strategy": self.strategy,
            "loss.gamma": self.gamma, "optim.epochs": self.epochs,
            "optim.batch_size": self.batch_size, "optim.lr": self.lr,
            "model.embed_dim": self.embed_dim, "model.depth": self.depth,
            "model.heads": self.heads, "model.patch_size": self.patch_size,
            "views.global_out": self.global_out, "views.local_out": self.local_out,
            "seed": self.seed,
        })
        if self.overrides:
            cfg.update(self.overrides)
        return cfg.validate()

    def fit(self, X, y=None, gsd=1.0, run_dir=None):
        from satdino.train import pretrain

        images = check_images(X)
        gsd = check_gsd(gsd, len(images))
        samples = [GeoSample(img, float(g), 0, sample_id=str(i))
                   for i, (img, g) in enumerate(zip(images, gsd))]
        self.config_ = self.make_config()
        self.state_ = pretrain(self.config_, samples, run_dir)
        self.history_ = list(self.state_.history)
        self.n_features_out_ = self.config_.model.embed_dim
        return self

    @classmethod
    def from_checkpoint(cls, path, force: bool = False) -> "SatDINO":
        from satdino.checkpoint import load_checkpoint

        state = load_checkpoint(path, force=force)
        c = state.config
        est = cls(n_local=c.views.n_local, strategy=c.views.strategy, gamma=c.loss.gamma,
                  epochs=c.optim.epochs, batch_size=c.optim.batch_size, lr=c.optim.lr,
                  embed_dim=c.model.embed_dim, depth=c.model.depth, heads=c.model.heads,
                  patch_size=c.model.patch_size, global_out=c.views.global_out,
                  local_out=c.views.local_out, seed=c.seed)
        est.config_, est.state_, est.history_ = c, state, list(state.history)
        est.n_features_out_ = c.model.embed_dim
        return est

    @property
    def norm_(self) -> Normalization:
        return self.state_.norm

    def transform(self, X, scale: float = 1.0):
        check_is_fitted(self, "state_")
        images = check_images(X)
        fm = extract_features(self.state_.teacher.backbone, images, np.zeros(len(images)),
                              self.config_.views.global_out, scale, self.norm_)
        return fm.rows

    @torch.no_grad()
    def predict_gsd(self, X) -> np.ndarray:
        """Teacher GSD-head estimates at the model input size (one per image)."""
        check_is_fitted(self, "state_")
        teacher = self.state_.teacher
        if teacher.gsd_head is None:
            raise ConfigurationError("model was trained without a GSD token")
        images = check_images(X)
        batch = prepare_images(images, self.config_.views.global_out, 1.0, self.norm_)
        teacher.eval()
        _, gsd = teacher(batch)
        return gsd.numpy().astype(np.float64)


class WeightedKNNClassifier(ClassifierMixin, BaseEstimator):
    """Cosine kNN with exp(sim / temperature) vote weights."""

    def __init__(self, n_neighbors=KNN_K, temperature=KNN_TEMPERATURE):
        self.n_neighbors = n_neighbors
        self.temperature = temperature

    def fit(self, X, y):
        X, y = check_features(X, y)
        self.classes_, self.y_ = np.unique(y, return_inverse=True)
        self.X_ = X
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "X_")
        X = check_features(X)
        scores = knn_scores(self.X_, self.y_, X, self.n_neighbors, self.temperature,
                            len(self.classes_))
        return scores / scores.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Single linear layer trained with AdamW on fixed features."""

    def __init__(self, epochs=25, lr=1e-3, batch_size=64, seed=0):
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X, y = check_features(X, y)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigurationError("probing needs at least two classes")
        self.layer_ = train_linear_classifier(
            torch.from_numpy(X.astype(np.float32)), torch.from_numpy(yi.astype(np.int64)),
            len(self.classes_), self.epochs, self.lr, self.batch_size, seed=self.seed,
        )
        return self

    @torch.no_grad()
    def decision_function(self, X):
        check_is_fitted(self, "layer_")
        X = check_features(X)
        return self.layer_(torch.from_numpy(X.astype(np.float32))).numpy()

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
