"""Retrieval metrics: cosine ranking, recall at K and median rank."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .losses import cycle_errors

KS = (1, 5, 10, 50)


@dataclass
class EmbeddingTable:
    ids: list
    matrix: np.ndarray
    level: str = "high"

    def normalized(self) -> "EmbeddingTable":
        return EmbeddingTable(list(self.ids), l2_normalize_rows(self.matrix), self.level)


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("degenerate vector")
    return x / norms


def rank_all(queries: EmbeddingTable, gallery: EmbeddingTable) -> np.ndarray:
    """1-based rank of the true match for each query (ties go to the lower gallery index)."""
    if sorted(map(str, queries.ids)) != sorted(map(str, gallery.ids)) or len(set(gallery.ids)) != len(gallery.ids):
        raise ValueError("query and gallery ids differ")
    q = l2_normalize_rows(queries.matrix)
    g = l2_normalize_rows(gallery.matrix)
    sims = q @ g.T
    pos = {gid: j for j, gid in enumerate(gallery.ids)}
    target = np.array([pos[i] for i in queries.ids])
    true_sim = sims[np.arange(len(target)), target][:, None]
    cols = np.arange(sims.shape[1])[None, :]
    ahead = (sims > true_sim) | ((sims == true_sim) & (cols < target[:, None]))
    return ahead.sum(axis=1) + 1


@dataclass
class RetrievalReport:
    r1: float
    r5: float
    r10: float
    r50: float
    median_rank: float
    direction: str = ""
    ranks: list = field(default_factory=list, repr=False)

    def recall(self, k: int) -> float:
        return {1: self.r1, 5: self.r5, 10: self.r10, 50: self.r50}[k]

    def to_dict(self, with_ranks: bool = False) -> dict:
        out = asdict(self)
        if not with_ranks:
            out.pop("ranks")
        return out


def report(ranks, direction: str = "") -> RetrievalReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise ValueError("no ranks")
    n = ranks.size
    recalls = [100.0 * float((ranks <= k).sum()) / n for k in KS]
    lower_median = float(np.sort(ranks)[(n - 1) // 2])
    return RetrievalReport(*recalls, lower_median, direction, ranks.tolist())


def retrieval(videos: EmbeddingTable, paragraphs: EmbeddingTable, direction: str = "both"
              ) -> dict[str, RetrievalReport]:
    """``v2p`` queries with videos and searches paragraphs; ``p2v`` the reverse."""
    out = {}
    if direction in ("v2p", "both"):
        out["v2p"] = report(rank_all(videos, paragraphs), "v2p")
    if direction in ("p2v", "both"):
        out["p2v"] = report(rank_all(paragraphs, videos), "p2v")
    if not out:
        raise ValueError(f"unknown direction {direction!r}")
    return out


def format_table(reports: dict[str, RetrievalReport]) -> str:
    header = f"{'direction':<10}{'R@1':>8}{'R@5':>8}{'R@10':>8}{'R@50':>8}{'MR':>8}"
    lines = [header, "-" * len(header)]
    for name, r in reports.items():
        lines.append(f"{name:<10}{r.r1:>8.2f}{r.r5:>8.2f}{r.r10:>8.2f}{r.r50:>8.2f}{r.median_rank:>8.1f}")
    return "\n".join(lines)


def reports_json(reports: dict[str, RetrievalReport]) -> str:
    return json.dumps({k: v.to_dict() for k, v in reports.items()}, sort_keys=True)


def cycle_diagnostic(pairs) -> dict[str, float]:
    """Mean absolute cycle-back error |i - mu| over ``(clips, sentences)`` pairs."""
    t2v, v2t = [], []
    for clips, sentences in pairs:
        a, b = cycle_errors(clips, sentences)
        t2v.append(np.abs(a))
        v2t.append(np.abs(b))
    t2v, v2t = np.concatenate(t2v), np.concatenate(v2t)
    return {"t2v": float(t2v.mean()), "v2t": float(v2t.mean()),
            "mean": float(np.concatenate([t2v, v2t]).mean())}


# ---------------------------------------------------------------------------
# model-level helpers
# ---------------------------------------------------------------------------

@dataclass
class DatasetEmbeddings:
    ids: list
    videos: np.ndarray
    paragraphs: np.ndarray
    clips: list            # per pair (n_i x d)
    sentences: list

    def tables(self, level: str = "high") -> tuple[EmbeddingTable, EmbeddingTable]:
        if level == "high":
            return (EmbeddingTable(self.ids, self.videos, "high"),
                    EmbeddingTable(self.ids, self.paragraphs, "high"))
        if level != "low":
            raise ValueError(f"unknown level {level!r}")
        seg_ids = [f"{pid}#{i}" for pid, c in zip(self.ids, self.clips) for i in range(len(c))]
        return (EmbeddingTable(seg_ids, np.concatenate(self.clips), "low"),
                EmbeddingTable(seg_ids, np.concatenate(self.sentences), "low"))


def embed_dataset(model, ds, batch_size: int = 64) -> DatasetEmbeddings:
    """Evaluation-mode embeddings for every pair, batched in dataset order."""
    from .data import make_batch

    was_training = model.training
    model.eval()
    vids, pars, clips, sents = [], [], [], []
    ids = ds.ids
    try:
        with nc.no_grad():
            for start in range(0, len(ids), batch_size):
                chunk = ids[start:start + batch_size]
                emb = model(make_batch(ds, chunk, mode="eval"))
                vids.append(emb.videos.data)
                pars.append(emb.paragraphs.data)
                for k in range(len(chunk)):
                    rows = emb.clip_index[k][emb.clip_index[k] >= 0]
                    clips.append(emb.clips.data[rows])
                    rows = emb.sentence_index[k][emb.sentence_index[k] >= 0]
                    sents.append(emb.sentences.data[rows])
    finally:
        model.train(was_training)
    return DatasetEmbeddings(ids, np.concatenate(vids), np.concatenate(pars), clips, sents)


def evaluate(model, ds, level: str = "high", direction: str = "both", batch_size: int = 64
             ) -> dict[str, RetrievalReport]:
    emb = embed_dataset(model, ds, batch_size)
    v, p = emb.tables(level)
    return retrieval(v, p, direction)


def r1_sum(reports: dict[str, RetrievalReport]) -> float:
    return sum(r.r1 for r in reports.values())
