"""scikit-learn style wrapper: fit on paired data, transform to joint embeddings."""

from __future__ import annotations

import os

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, Sample, read_dataset
from .evaluation import embed_dataset, retrieval
from .losses import LossConfig
from .model import ModelConfig
from .trainer import OptimConfig, train


def check_dataset(X) -> Dataset:
    """Coerce ``X`` (a Dataset, a file prefix or a list of Samples) to a nonempty Dataset."""
    if isinstance(X, Dataset):
        ds = X
    elif isinstance(X, (str, os.PathLike)):
        ds = read_dataset(X)
    elif isinstance(X, (list, tuple)) and X and all(isinstance(s, Sample) for s in X):
        ds = Dataset(X[0].video.shape[1], X[0].text.shape[1], list(X))
    else:
        raise TypeError(f"expected a Dataset, a dataset prefix or a list of Samples, got {type(X).__name__}")
    if len(ds) == 0:
        raise ValueError("empty dataset")
    for s in ds.samples:
        if s.video.ndim != 2 or s.video.shape[1] != ds.video_dim:
            raise ValueError(f"{s.id}: video features must be (frames, {ds.video_dim})")
        if s.text.ndim != 2 or s.text.shape[1] != ds.text_dim:
            raise ValueError(f"{s.id}: text features must be (tokens, {ds.text_dim})")
        if not s.clips or len(s.clips) != len(s.sentences):
            raise ValueError(f"{s.id}: needs matching nonempty clip and sentence lists")
        if not (np.isfinite(s.video).all() and np.isfinite(s.text).all()):
            raise ValueError(f"{s.id}: features contain NaN or Inf")
    return ds


class CootEmbedder(TransformerMixin, BaseEstimator):
    """Learns a joint video/paragraph embedding space from paired, segmented data.

    ``transform`` returns the video-side (or text-side) embeddings of every
    pair; ``predict`` retrieves the best-matching paragraph for each video and
    ``score`` is the mean R@1 over both retrieval directions, as a fraction.
    """

    def __init__(self, d=64, heads=8, low_pool="afa", dropout=0.025, cmc_weight=0.01,
                 lr=1e-3, weight_decay=2e-5, max_epochs=30, batch_size=64, feature_noise=0.0,
                 reduction="mean", seed=0):
        self.d = d
        self.heads = heads
        self.low_pool = low_pool
        self.dropout = dropout
        self.cmc_weight = cmc_weight
        self.lr = lr
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.feature_noise = feature_noise
        self.reduction = reduction
        self.seed = seed

    def _configs(self, ds: Dataset):
        model_cfg = ModelConfig(ds.video_dim, ds.text_dim, d=self.d, heads=self.heads,
                                low_pool=self.low_pool, dropout=self.dropout)
        model_cfg.branch("video")
        optim_cfg = OptimConfig(lr=self.lr, weight_decay=self.weight_decay, max_epochs=self.max_epochs,
                                batch_size=self.batch_size, feature_noise=self.feature_noise)
        loss_cfg = LossConfig(cmc_weight=self.cmc_weight, reduction=self.reduction)
        return model_cfg, optim_cfg, loss_cfg

    def fit(self, X, y=None, validation=None):
        """Train on ``X``; ``validation`` (same forms as X) drives model selection if given."""
        ds = check_dataset(X)
        val = check_dataset(validation) if validation is not None else None
        model_cfg, optim_cfg, loss_cfg = self._configs(ds)
        result = train(ds, model_cfg, optim_cfg, loss_cfg, seed=self.seed, val_ds=val)
        self.model_ = result.model
        self.history_ = result.log
        self.best_epoch_ = result.state.best_epoch
        self.feature_dims_ = (ds.video_dim, ds.text_dim)
        return self

    def _checked(self, X) -> Dataset:
        check_is_fitted(self, "model_")
        ds = check_dataset(X)
        if (ds.video_dim, ds.text_dim) != self.feature_dims_:
            raise ValueError(f"feature widths {(ds.video_dim, ds.text_dim)} differ from "
                             f"those seen in fit {self.feature_dims_}")
        return ds

    def embed(self, X):
        ds = self._checked(X)
        return embed_dataset(self.model_, ds)

    def transform(self, X, modality: str = "video") -> np.ndarray:
        if modality not in ("video", "text"):
            raise ValueError("modality must be 'video' or 'text'")
        emb = self.embed(X)
        return emb.videos if modality == "video" else emb.paragraphs

    def predict(self, X) -> list[str]:
        """Id of the nearest paragraph (cosine) for every video in ``X``."""
        emb = self.embed(X)
        v = emb.videos / np.linalg.norm(emb.videos, axis=1, keepdims=True)
        p = emb.paragraphs / np.linalg.norm(emb.paragraphs, axis=1, keepdims=True)
        return [emb.ids[j] for j in np.argmax(v @ p.T, axis=1)]

    def score(self, X, y=None) -> float:
        emb = self.embed(X)
        reports = retrieval(*emb.tables("high"))
        return float(np.mean([r.r1 for r in reports.values()]) / 100.0)
