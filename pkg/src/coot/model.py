"""The two-branch hierarchical video/text encoder and its checkpoint format.

Each branch maps frame (or word) features to three levels of embeddings:

1. a pointwise projection to width ``d``;
2. one temporal transformer, shared by every clip and by the whole video;
3. low-level pooling (AFA by default) giving clip embeddings and the global
   context vector;
4. a contextual transformer: self-attention over the clip embeddings
   (``local``), then cross-attention queried by the global context
   (``global``). The final embedding is ``concat(mean(h), context)`` of width
   ``2d``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numcore as nc
from .aggregation import AttentionFA
from .layers import (FeedForward, LayerNorm, Linear, MultiHeadAttention, ParameterStore,
                     PoolingMode, PositionalEmbedding, TransformerBlock, pool)
from .numcore import Tensor

CHECKPOINT_MAGIC = b"COOTCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class BranchConfig:
    input_dim: int
    d: int = 384
    heads: int = 8
    ff_dim: int | None = None          # defaults to d ("1x")
    afa_heads: int = 2
    afa_dim: int | None = None         # defaults to 2d ("2x")
    dropout: float = 0.025
    low_pool: str = "afa"
    high_pool: dict = field(default_factory=lambda: asdict(PoolingMode()))
    max_len: int = 80
    max_segments: int = 64

    def __post_init__(self):
        if self.d % self.heads or self.d % self.afa_heads:
            raise ValueError("d must be divisible by the attention and AFA head counts")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        PoolingMode.parse(self.low_pool)
        PoolingMode.parse(self.high_pool)

    @property
    def high_mode(self) -> PoolingMode:
        return PoolingMode.parse(self.high_pool)


@dataclass
class ModelConfig:
    video_dim: int
    text_dim: int
    d: int = 384
    heads: int = 8
    ff_dim: int | None = None
    afa_heads: int = 2
    afa_dim: int | None = None
    dropout: float = 0.025
    low_pool: str = "afa"
    high_pool: dict = field(default_factory=lambda: asdict(PoolingMode()))
    max_len: int = 80
    max_segments: int = 64

    def branch(self, modality: str) -> BranchConfig:
        shared = {k: v for k, v in asdict(self).items() if k not in ("video_dim", "text_dim")}
        dim = self.video_dim if modality == "video" else self.text_dim
        return BranchConfig(input_dim=dim, **shared)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class BranchOutput:
    segments: Tensor      # (S, d) clip or sentence embeddings
    context: Tensor       # (B, d) global context
    final: Tensor         # (B, 2d) video or paragraph embedding


class Branch:
    """One modality's encoder stack."""

    def __init__(self, store: ParameterStore, name: str, cfg: BranchConfig):
        self.cfg = cfg
        d = cfg.d
        ff = cfg.ff_dim or d
        self.low_mode = PoolingMode.parse(cfg.low_pool)
        self.high_mode = cfg.high_mode
        self.input_proj = Linear(store, f"{name}.input", cfg.input_dim, d)
        use_cls = self.low_mode.kind == "cls"
        self.cls_token = store.create(f"{name}.cls_token", (1, 1, d)) if use_cls else None
        self.temporal_pos = PositionalEmbedding(store, f"{name}.temporal.pos",
                                                cfg.max_len + int(use_cls), d)
        self.temporal = TransformerBlock(store, f"{name}.temporal", d, cfg.heads, ff, cfg.dropout)
        self.afa = (AttentionFA(store, f"{name}.afa", d, cfg.afa_heads, cfg.afa_dim or 2 * d)
                    if self.low_mode.kind == "afa" else None)
        self.local_pos = PositionalEmbedding(store, f"{name}.local.pos", cfg.max_segments, d)
        self.local = TransformerBlock(store, f"{name}.local", d, cfg.heads, ff, cfg.dropout)
        self.cross = MultiHeadAttention(store, f"{name}.global.attn", d, cfg.heads)
        self.cross_norm = LayerNorm(store, f"{name}.global.norm1", d)
        self.cross_ff = FeedForward(store, f"{name}.global.ff", d, ff)
        self.cross_ff_norm = LayerNorm(store, f"{name}.global.norm2", d)

    # -- levels ------------------------------------------------------------
    def encode_sequences(self, feats: np.ndarray, mask: np.ndarray,
                         rng: np.random.Generator | None = None) -> Tensor:
        """Shared temporal transformer plus low-level pooling: (N, T, D) -> (N, d)."""
        mask = np.asarray(mask, dtype=bool)
        if feats.shape[-1] != self.cfg.input_dim:
            raise ValueError(f"feature width {feats.shape[-1]} != {self.cfg.input_dim}")
        if not mask.any(axis=1).all():
            raise ValueError("empty segment")
        feats = np.where(mask[:, :, None], feats, 0.0).astype(nc.DEFAULT_DTYPE)
        x = self.input_proj(Tensor(feats))
        if self.cls_token is not None:
            N = x.shape[0]
            tok = self.cls_token * Tensor(np.ones((N, 1, 1), dtype=x.dtype))
            x = nc.concat([tok, x], axis=1)
            mask = np.concatenate([np.ones((N, 1), bool), mask], axis=1)
        x = self.temporal(self.temporal_pos(x), mask, rng)
        if self.afa is not None:
            return self.afa(x, mask)
        return pool(x, mask, self.low_mode)

    def contextual(self, segments: Tensor, seg_index: np.ndarray, context: Tensor,
                   rng: np.random.Generator | None = None) -> Tensor:
        """Contextual transformer over padded segment embeddings -> (B, 2d)."""
        B, n_max = seg_index.shape
        d = self.cfg.d
        mask = seg_index >= 0
        padded = nc.concat([segments, Tensor(np.zeros((1, d), dtype=segments.dtype))], axis=0)
        rows = np.where(mask, seg_index, segments.shape[0]).reshape(-1)
        local_in = nc.take_rows(padded, rows).reshape(B, n_max, d)
        h = self.local(self.local_pos(local_in), mask, rng)
        g = context.reshape(B, 1, d)
        q = self.cross.q(g)
        attn = nc.dropout(self.cross(g, h, mask, q_proj=q), self.cfg.dropout, rng)
        y = self.cross_norm(q + attn)
        f = nc.dropout(self.cross_ff(y), self.cfg.dropout, rng)
        h_context = self.cross_ff_norm(y + f).reshape(B, d)
        return nc.concat([pool(h, mask, self.high_mode), h_context], axis=-1)

    def __call__(self, side, rng: np.random.Generator | None = None,
                 feature_noise: float = 0.0) -> BranchOutput:
        seg_feats, whole_feats = side.seg_feats, side.whole_feats
        if feature_noise > 0 and rng is not None:
            seg_feats = seg_feats + feature_noise * rng.standard_normal(seg_feats.shape)
            whole_feats = whole_feats + feature_noise * rng.standard_normal(whole_feats.shape)
        segments = self.encode_sequences(seg_feats, side.seg_mask, rng)
        context = self.encode_sequences(whole_feats, side.whole_mask, rng)
        final = self.contextual(segments, side.seg_index, context, rng)
        return BranchOutput(segments, context, final)


@dataclass
class BatchEmbeddings:
    """Model outputs for a batch of video/paragraph pairs.

    Clip ``s`` and sentence ``s`` are aligned; ``owner[s]`` is the pair index
    and ``position[s]`` the index within the pair. ``seg_index[k, i]`` points
    at the row of the ``i``-th segment of pair ``k`` (or -1 for padding).
    """

    clips: Tensor
    sentences: Tensor
    videos: Tensor
    paragraphs: Tensor
    video_context: Tensor
    paragraph_context: Tensor
    owner: np.ndarray
    position: np.ndarray
    clip_index: np.ndarray
    sentence_index: np.ndarray

    @property
    def n_pairs(self) -> int:
        return self.videos.shape[0]


class CootModel:
    """Video and text branches sharing one parameter store."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params = ParameterStore()
        self.video = Branch(self.params, "video", cfg.branch("video"))
        self.text = Branch(self.params, "text", cfg.branch("text"))
        self.training = False

    def train(self, mode: bool = True) -> "CootModel":
        self.training = mode
        return self

    def eval(self) -> "CootModel":
        return self.train(False)

    def __call__(self, batch, rng: np.random.Generator | None = None,
                 feature_noise: float = 0.0) -> BatchEmbeddings:
        if not self.training:
            rng, feature_noise = None, 0.0
        v = self.video(batch.video, rng, feature_noise)
        t = self.text(batch.text, rng, feature_noise)
        return BatchEmbeddings(v.segments, t.segments, v.final, t.final, v.context, t.context,
                               batch.owner, batch.position,
                               batch.video.seg_index, batch.text.seg_index)

    def n_parameters(self, prefix: str = "") -> int:
        return self.params.n_scalars(prefix)


def encode_branch(model: CootModel, batch, modality: str = "video") -> BranchOutput:
    """Evaluation-mode forward pass of one branch."""
    branch = model.video if modality == "video" else model.text
    side = batch.video if modality == "video" else batch.text
    with nc.no_grad():
        return branch(side)


def contextual_transformer(branch: Branch, local: Tensor, g: Tensor) -> Tensor:
    """Run the contextual transformer for a single sequence ``local`` (n x d)."""
    n = local.shape[0]
    seg_index = np.arange(n)[None, :]
    return branch.contextual(local, seg_index, g.reshape(1, -1)).reshape(-1)


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

def _encode_checkpoint(state: dict[str, np.ndarray], config: dict) -> bytes:
    header = json.dumps({"format_version": CHECKPOINT_VERSION, "config": config},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def _decode_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    try:
        return _decode_body(blob)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"truncated or corrupt checkpoint ({exc})") from None


def _decode_body(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    pos = 8
    (hlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if shape else 1
        if pos + 4 * n > len(blob):
            raise struct.error(f"tensor {name} runs past the end of the file")
        state[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return header, state


def save_checkpoint(path, model: CootModel, extra: dict | None = None) -> None:
    config = {"model": model.cfg.to_dict()}
    if extra:
        config.update(extra)
    with open(path, "wb") as fh:
        fh.write(_encode_checkpoint(model.params.state_dict(), config))


def load_checkpoint(path) -> tuple[CootModel, dict]:
    with open(path, "rb") as fh:
        header, state = _decode_checkpoint(fh.read())
    config = header["config"]
    model = CootModel(ModelConfig.from_dict(config["model"]))
    model.params.load_state_dict(state)
    return model, config


def clone_model(model: CootModel, **overrides) -> CootModel:
    """Copy of ``model`` (optionally with config overrides that keep parameter shapes)."""
    other = CootModel(replace(model.cfg, **overrides))
    other.params.load_state_dict(model.params.state_dict())
    return other
