"""Training objectives for the joint video/text embedding.

The margin losses are evaluated over whole distance matrices with boolean
masks selecting the negative combinations, which keeps the op count
independent of batch size. Segment-level negatives pair every clip/sentence
with those of *other* pairs at *other* positions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

logger = logging.getLogger(__name__)

TERMS = ("align_low", "align_high", "align_global", "cluster", "cmc")


@dataclass
class LossConfig:
    alpha: float = 0.2          # video/paragraph
    alpha_g: float = 0.2        # global context
    beta: float = 0.2           # clip/sentence
    gamma: float = 0.2          # low-level clustering
    eta: float = 0.2            # high-level clustering
    cmc_weight: float = 0.01
    align_low: bool = True
    align_high: bool = True
    align_global: bool = True
    cluster: bool = True
    cmc: bool = True
    cmc_source_samples: int | None = None
    # "sum" adds every hinge term; "mean" divides each margin loss by its
    # number of negative combinations so that it is batch-size independent
    reduction: str = "mean"

    def __post_init__(self):
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        for name in ("alpha", "alpha_g", "beta", "gamma", "eta"):
            if getattr(self, name) < 0:
                raise ValueError(f"margin {name} must be non-negative")
        if self.cmc_weight < 0:
            raise ValueError("cmc_weight must be non-negative")
        if self.cmc_source_samples is not None and self.cmc_source_samples < 1:
            raise ValueError("cmc_source_samples must be positive")


def margin_contrastive(x, y, x_neg, y_neg, margin: float) -> Tensor:
    """Hinge loss pulling ``(x, y)`` together relative to ``(x_neg, y)`` and ``(x, y_neg)``."""
    pos = nc.cosine_distance(x, y)
    return (nc.relu(margin + pos - nc.cosine_distance(x_neg, y))
            + nc.relu(margin + pos - nc.cosine_distance(x, y_neg)))


def _reduce(terms: Tensor, negatives: np.ndarray, reduction: str) -> Tensor:
    total = (terms * Tensor(negatives.astype(terms.dtype))).sum()
    if reduction == "mean":
        total = total * (1.0 / max(int(negatives.sum()), 1))
    return total


def _contrastive_sum(x: Tensor, y: Tensor, negatives: np.ndarray, margin: float,
                     reduction: str = "sum") -> Tensor:
    # dist[a, b] = D(x_a, y_b); row a is the anchor pair (x_a, y_a)
    dist = nc.pairwise_cosine_distance(x, y)
    n = dist.shape[0]
    pos = dist[np.arange(n), np.arange(n)].reshape(n, 1)
    hinge = nc.relu(margin + pos - nc.transpose(dist)) + nc.relu(margin + pos - dist)
    return _reduce(hinge, negatives, reduction)


def _push_apart_sum(x: Tensor, negatives: np.ndarray, margin: float, reduction: str = "sum") -> Tensor:
    dist = nc.pairwise_cosine_distance(x, x)
    return _reduce(nc.relu(margin - dist), negatives, reduction)


def segment_negatives(owner: np.ndarray, position: np.ndarray) -> np.ndarray:
    """Mask of segment pairs from different videos at different positions."""
    return (owner[:, None] != owner[None, :]) & (position[:, None] != position[None, :])


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype))


def alignment_losses(emb, cfg: LossConfig, enabled=(True, True, True)) -> tuple[Tensor, Tensor, Tensor]:
    """Clip/sentence, video/paragraph and global-context contrastive losses.

    Terms switched off in ``enabled`` are returned as zero without being computed.
    """
    z = _zero(emb.videos)
    if emb.n_pairs < 2:
        logger.warning("alignment losses need at least 2 pairs; returning 0")
        return z, z, z
    pair_neg = ~np.eye(emb.n_pairs, dtype=bool)
    r = cfg.reduction
    want_low, want_high, want_glob = enabled
    low = (_contrastive_sum(emb.clips, emb.sentences, segment_negatives(emb.owner, emb.position), cfg.beta, r)
           if want_low else z)
    high = _contrastive_sum(emb.videos, emb.paragraphs, pair_neg, cfg.alpha, r) if want_high else z
    glob = (_contrastive_sum(emb.video_context, emb.paragraph_context, pair_neg, cfg.alpha_g, r)
            if want_glob else z)
    return low, high, glob


def clustering_loss(emb, cfg: LossConfig) -> Tensor:
    """Push apart same-modality embeddings of different pairs (low and high level)."""
    if emb.n_pairs < 2:
        logger.warning("clustering loss needs at least 2 pairs; returning 0")
        return _zero(emb.videos)
    seg_neg = segment_negatives(emb.owner, emb.position)
    pair_neg = ~np.eye(emb.n_pairs, dtype=bool)
    r = cfg.reduction
    return (_push_apart_sum(emb.clips, seg_neg, cfg.gamma, r)
            + _push_apart_sum(emb.sentences, seg_neg, cfg.gamma, r)
            + _push_apart_sum(emb.videos, pair_neg, cfg.eta, r)
            + _push_apart_sum(emb.paragraphs, pair_neg, cfg.eta, r))


# ---------------------------------------------------------------------------
# cross-modal cycle consistency
# ---------------------------------------------------------------------------

def _gather_padded(rows: Tensor, index: np.ndarray) -> Tensor:
    B, n = index.shape
    d = rows.shape[-1]
    padded = nc.concat([rows, Tensor(np.zeros((1, d), dtype=rows.dtype))], axis=0)
    flat = np.where(index >= 0, index, rows.shape[0]).reshape(-1)
    return nc.take_rows(padded, flat).reshape(B, n, d)


def _sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """(B, m, d), (B, n, d) -> (B, m, n) squared Euclidean distances."""
    B, m, d = a.shape
    n = b.shape[1]
    diff = a.reshape(B, m, 1, d) - b.reshape(B, 1, n, d)
    return (diff * diff).sum(axis=-1)


def _cycle_errors(src: Tensor, src_mask: np.ndarray, dst: Tensor, dst_mask: np.ndarray) -> Tensor:
    """Signed cycle-back index error ``i - mu`` for every source position: (B, m)."""
    alpha = nc.softmax(-1.0 * _sq_dist(src, dst), axis=-1, mask=dst_mask[:, None, :])
    soft_nn = alpha @ dst                                              # (B, m, d)
    beta = nc.softmax(-1.0 * _sq_dist(soft_nn, src), axis=-1, mask=src_mask[:, None, :])
    m = src.shape[1]
    idx = np.arange(m, dtype=beta.dtype)
    mu = (beta * Tensor(idx[None, None, :])).sum(axis=-1)              # (B, m)
    return Tensor(np.broadcast_to(idx, mu.shape).copy()) - mu


def _source_mask(valid: np.ndarray, samples: int | None, rng) -> np.ndarray:
    if samples is None or rng is None:
        return valid
    chosen = np.zeros_like(valid)
    for k in range(valid.shape[0]):
        idx = np.flatnonzero(valid[k])
        if len(idx) > samples:
            idx = np.sort(rng.choice(idx, size=samples, replace=False))
        chosen[k, idx] = True
    return chosen


def _cycle_term(src, src_mask, dst, dst_mask, samples, rng) -> Tensor:
    err = _cycle_errors(src, src_mask, dst, dst_mask)
    use = _source_mask(src_mask, samples, rng).astype(err.dtype)
    per_pair = (err * err * Tensor(use)).sum(axis=-1)
    return per_pair / Tensor(use.sum(axis=-1))


def cmc_batch(clips: Tensor, clip_index: np.ndarray, sentences: Tensor, sentence_index: np.ndarray,
              cfg: LossConfig, rng: np.random.Generator | None = None) -> Tensor:
    """Per-pair cycle-consistency loss, both directions: shape (B,)."""
    v = _gather_padded(clips, clip_index)
    t = _gather_padded(sentences, sentence_index)
    vm, tm = clip_index >= 0, sentence_index >= 0
    return (_cycle_term(t, tm, v, vm, cfg.cmc_source_samples, rng)
            + _cycle_term(v, vm, t, tm, cfg.cmc_source_samples, rng))


def cmc_loss(clips, sentences, cfg: LossConfig | None = None,
             rng: np.random.Generator | None = None) -> Tensor:
    """Cycle-consistency loss for one pair: ``clips`` (n x d), ``sentences`` (m x d)."""
    cfg = cfg or LossConfig()
    clips, sentences = nc.as_tensor(clips), nc.as_tensor(sentences)
    n, m = clips.shape[0], sentences.shape[0]
    out = cmc_batch(clips, np.arange(n)[None, :], sentences, np.arange(m)[None, :], cfg, rng)
    return out.reshape(())


def cycle_errors(clips, sentences) -> tuple[np.ndarray, np.ndarray]:
    """Signed cycle-back errors for text->video->text and video->text->video."""
    clips, sentences = nc.as_tensor(clips), nc.as_tensor(sentences)
    with nc.no_grad():
        v = clips.reshape(1, *clips.shape)
        t = sentences.reshape(1, *sentences.shape)
        vm = np.ones((1, clips.shape[0]), bool)
        tm = np.ones((1, sentences.shape[0]), bool)
        return (_cycle_errors(t, tm, v, vm).data[0].astype(np.float64),
                _cycle_errors(v, vm, t, tm).data[0].astype(np.float64))


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------

def total_loss(emb, cfg: LossConfig, rng: np.random.Generator | None = None
               ) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the enabled terms plus a float breakdown for logging.

    A zero CMC weight skips the term entirely, so it is indistinguishable from
    switching CMC off.
    """
    terms: dict[str, Tensor] = {}
    if cfg.align_low or cfg.align_high or cfg.align_global:
        low, high, glob = alignment_losses(emb, cfg, (cfg.align_low, cfg.align_high, cfg.align_global))
        if cfg.align_low:
            terms["align_low"] = low
        if cfg.align_high:
            terms["align_high"] = high
        if cfg.align_global:
            terms["align_global"] = glob
    if cfg.cluster:
        terms["cluster"] = clustering_loss(emb, cfg)
    if cfg.cmc and cfg.cmc_weight > 0:
        per_pair = cmc_batch(emb.clips, emb.clip_index, emb.sentences, emb.sentence_index, cfg, rng)
        terms["cmc"] = per_pair.mean()
    total = None
    for name, value in terms.items():
        weighted = value * cfg.cmc_weight if name == "cmc" else value
        total = weighted if total is None else total + weighted
    if total is None:
        total = _zero(emb.videos)
    breakdown = {name: float(v.data) for name, v in terms.items()}
    breakdown["total"] = float(total.data)
    return total, breakdown
