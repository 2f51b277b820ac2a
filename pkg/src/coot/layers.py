"""Transformer building blocks and sequence pooling on batched, masked input.

Sequences are laid out as ``(B, T, d)`` arrays with a boolean ``(B, T)``
validity mask. Parameters live in a :class:`ParameterStore` under dotted names
so that weight sharing is simply reuse of the same module object.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

POOLING_KINDS = ("max", "cls", "avg_standard", "avg_pad_inclusive", "afa")


class ParameterStore:
    """Ordered mapping of parameter name to trainable tensor."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        # "weight" (truncated-normal init), "bias" (zeros), "gain" (ones)
        self.kinds: dict[str, str] = {}

    def create(self, name: str, shape, kind: str = "weight") -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        fill = 1.0 if kind == "gain" else 0.0
        t = Tensor(np.full(shape, fill, dtype=nc.DEFAULT_DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        self.kinds[name] = kind
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def n_scalars(self, prefix: str = "") -> int:
        return sum(t.data.size for n, t in self._params.items() if n.startswith(prefix))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, t in self._params.items():
            arr = np.asarray(state[n])
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)


class Linear:
    """Pointwise affine map ``x @ W + b`` over the last axis."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.weight = store.create(f"{name}.weight", (d_in, d_out))
        self.bias = store.create(f"{name}.bias", (d_out,), "bias") if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"width mismatch: expected {self.d_in}, got {x.shape[-1]}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, d: int, eps: float = 1e-5):
        self.gain = store.create(f"{name}.gain", (d,), "gain")
        self.bias = store.create(f"{name}.bias", (d,), "bias")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nc.layer_norm(x, self.gain, self.bias, self.eps)


class PositionalEmbedding:
    """Learned table added to the first ``T`` positions of a sequence."""

    def __init__(self, store: ParameterStore, name: str, max_len: int, d: int):
        self.table = store.create(f"{name}.table", (max_len, d))
        self.max_len = max_len

    def __call__(self, x: Tensor) -> Tensor:
        T = x.shape[-2]
        if T > self.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.max_len}")
        return x + self.table[:T]


class MultiHeadAttention:
    """Scaled dot-product attention with ``heads`` heads and an output projection."""

    def __init__(self, store: ParameterStore, name: str, d: int, heads: int):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d, self.heads, self.d_head = d, heads, d // heads
        self.q = Linear(store, f"{name}.q", d, d)
        self.k = Linear(store, f"{name}.k", d, d)
        self.v = Linear(store, f"{name}.v", d, d)
        self.out = Linear(store, f"{name}.out", d, d)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, T, _ = x.shape
        return nc.transpose(x.reshape(B, T, self.heads, self.d_head), (0, 2, 1, 3))

    def __call__(self, q_input: Tensor, kv_input: Tensor, kv_mask: np.ndarray,
                 q_proj: Tensor | None = None) -> Tensor:
        """``q_input`` is (B, Tq, d), ``kv_input`` (B, Tk, d), ``kv_mask`` (B, Tk)."""
        if q_input.shape[-1] != self.d or kv_input.shape[-1] != self.d:
            raise ValueError("width mismatch in attention input")
        B, Tq, _ = q_input.shape
        q = self._split(q_proj if q_proj is not None else self.q(q_input))
        k = self._split(self.k(kv_input))
        v = self._split(self.v(kv_input))
        scores = (q @ nc.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.d_head))
        weights = nc.softmax(scores, axis=-1, mask=np.asarray(kv_mask, bool)[:, None, None, :])
        self.last_weights = weights.data
        ctx = nc.transpose(weights @ v, (0, 2, 1, 3)).reshape(B, Tq, self.d)
        return self.out(ctx)


class FeedForward:
    def __init__(self, store: ParameterStore, name: str, d: int, d_ff: int):
        self.fc1 = Linear(store, f"{name}.fc1", d, d_ff)
        self.fc2 = Linear(store, f"{name}.fc2", d_ff, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nc.gelu(self.fc1(x)))


class TransformerBlock:
    """Post-norm self-attention block: ``LN(x + attn)`` then ``LN(y + FF(y))``."""

    def __init__(self, store: ParameterStore, name: str, d: int, heads: int, d_ff: int,
                 dropout: float = 0.0):
        self.attn = MultiHeadAttention(store, f"{name}.attn", d, heads)
        self.norm1 = LayerNorm(store, f"{name}.norm1", d)
        self.ff = FeedForward(store, f"{name}.ff", d, d_ff)
        self.norm2 = LayerNorm(store, f"{name}.norm2", d)
        self.dropout = dropout

    def __call__(self, x: Tensor, mask: np.ndarray, rng: np.random.Generator | None = None) -> Tensor:
        a = nc.dropout(self.attn(x, x, mask), self.dropout, rng)
        y = self.norm1(x + a)
        f = nc.dropout(self.ff(y), self.dropout, rng)
        return self.norm2(y + f)


@dataclass(frozen=True)
class PoolingMode:
    """How a masked sequence collapses into one vector.

    For the average variants: ``sum_scope`` picks whether padded positions are
    summed too, ``pad_policy`` fixes the padded length (batch maximum, or at
    least 16) and ``divide_scope`` picks the divisor (valid count or padded
    length).
    """

    kind: str = "avg_pad_inclusive"
    sum_scope: str = "all"
    pad_policy: str = "batch"
    divide_scope: str = "nonzero"

    def __post_init__(self):
        if self.kind not in POOLING_KINDS:
            raise ValueError(f"unknown pooling kind {self.kind!r}")
        if self.sum_scope not in ("all", "nonzero"):
            raise ValueError(f"bad sum_scope {self.sum_scope!r}")
        if self.pad_policy not in ("batch", "max16"):
            raise ValueError(f"bad pad_policy {self.pad_policy!r}")
        if self.divide_scope not in ("all", "nonzero"):
            raise ValueError(f"bad divide_scope {self.divide_scope!r}")

    @classmethod
    def parse(cls, mode) -> "PoolingMode":
        """Build from a kind name, a dict of fields, or an existing mode."""
        if isinstance(mode, PoolingMode):
            return mode
        if isinstance(mode, dict):
            return cls(**mode)
        if mode in ("avg", "avg_standard"):
            return cls("avg_standard", "nonzero", "batch", "nonzero")
        return cls(mode)


def pool(x: Tensor, mask: np.ndarray, mode: PoolingMode) -> Tensor:
    """Collapse ``(B, T, d)`` to ``(B, d)``.

    ``cls`` returns position 0, which must hold a prepended token. ``afa`` needs
    learned weights and lives in :mod:`coot.aggregation`.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("empty sequence")
    if mode.kind == "max":
        return nc.max_(x, axis=1, mask=mask[:, :, None])
    if mode.kind == "cls":
        return x[:, 0, :]
    if mode.kind == "afa":
        raise ValueError("afa pooling requires an AttentionFA module")
    B, T, _ = x.shape
    if mode.sum_scope == "nonzero":
        total = nc.mask_rows(x, mask).sum(axis=1)
    else:
        # zero padding beyond T adds nothing to the sum
        total = x.sum(axis=1)
    if mode.divide_scope == "nonzero":
        count = mask.sum(axis=1).astype(x.dtype)
    else:
        padded = T if mode.pad_policy == "batch" else max(T, 16)
        count = np.full(B, padded, dtype=x.dtype)
    return total / Tensor(count[:, None].astype(x.dtype))
