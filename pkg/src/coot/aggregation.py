"""Attention-aware feature aggregation (AFA).

Each head scores every timestep with a two-layer GELU network over the full
feature vector and produces one weight per feature dimension of its slice.
Weights are normalized over time, so the pooled vector is a per-dimension
convex combination of the inputs.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .layers import ParameterStore
from .numcore import Tensor


class AttentionFA:
    """Multi-head AFA pooling ``(B, T, d) -> (B, d)``.

    Head ``h`` owns ``w1: (d, d_att)``, ``b1: (d_att,)``, ``w2: (d_att, d/H)``
    and ``b2: (d/H,)`` and weights the contiguous feature slice
    ``[h*d/H, (h+1)*d/H)``.
    """

    def __init__(self, store: ParameterStore, name: str, d: int, heads: int = 2,
                 d_att: int | None = None):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} AFA heads")
        d_att = 2 * d if d_att is None else d_att
        if d_att < 1:
            raise ValueError("d_att must be positive")
        self.d, self.heads, self.d_att, self.d_head = d, heads, d_att, d // heads
        self.w1 = store.create(f"{name}.w1", (heads, d, d_att))
        self.b1 = store.create(f"{name}.b1", (heads, 1, d_att), "bias")
        self.w2 = store.create(f"{name}.w2", (heads, d_att, self.d_head))
        self.b2 = store.create(f"{name}.b2", (heads, 1, self.d_head), "bias")
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        B, T, d = x.shape
        if d != self.d:
            raise ValueError(f"width mismatch: expected {self.d}, got {d}")
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("empty sequence")
        xh = x.reshape(B, 1, T, d)
        q = nc.gelu(xh @ self.w1 + self.b1)                 # (B, H, T, d_att)
        scores = q @ self.w2 + self.b2                       # (B, H, T, d/H)
        scores = nc.transpose(scores, (0, 2, 1, 3)).reshape(B, T, d)
        weights = nc.softmax(scores, axis=1, mask=mask[:, :, None])
        self.last_weights = weights.data
        return (weights * x).sum(axis=1)


def attention_fa(x: Tensor, mask: np.ndarray, afa: AttentionFA) -> Tensor:
    """Functional alias: pool ``x`` with the given AFA module."""
    return afa(x, mask)
