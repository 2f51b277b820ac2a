"""Synthetic paired video/text features, dataset files and batch assembly.

A synthetic pair is a sequence of topics. Clip ``i`` of the video and sentence
``i`` of the paragraph both express topic ``i`` through two fixed random
linear maps (one per modality) plus Gaussian noise, so the ground-truth
alignment is the shared index order. A fraction of frames and tokens are
distractors drawn from a small set of background concepts.

On disk a dataset is three files::

    <prefix>.manifest.json   {version, video_dim, text_dim, samples: [...]}
    <prefix>.video.f32       little-endian float32 rows, all videos back to back
    <prefix>.text.f32        same for paragraphs

Offsets in the manifest count rows, and a sample's extent runs to the next
sample's offset (or the end of the blob).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MAX_FRAMES = 80


@dataclass
class Sample:
    id: str
    clips: list[tuple[int, int]]
    sentences: list[tuple[int, int]]
    video: np.ndarray
    text: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.video.shape[0]


@dataclass
class Dataset:
    video_dim: int
    text_dim: int
    samples: list[Sample]
    topics: list[list[int]] | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def index(self, sample_id: str) -> int:
        try:
            return self._lookup()[sample_id]
        except KeyError:
            raise KeyError(f"unknown sample id {sample_id!r}") from None

    def _lookup(self) -> dict[str, int]:
        return {s.id: i for i, s in enumerate(self.samples)}

    def subset(self, ids) -> "Dataset":
        lookup = self._lookup()
        idx = [lookup[i] for i in ids]
        topics = [self.topics[i] for i in idx] if self.topics is not None else None
        return Dataset(self.video_dim, self.text_dim, [self.samples[i] for i in idx], topics)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        ids = self.ids
        return self.subset(ids[:n_first]), self.subset(ids[n_first:])


@dataclass
class SynthConfig:
    n_pairs: int = 128
    clips_per_pair: tuple[int, int] = (2, 4)
    frames_per_clip: tuple[int, int] = (4, 10)
    tokens_per_sentence: tuple[int, int] = (3, 8)
    gap_frames: tuple[int, int] = (0, 2)
    n_topics: int = 64
    n_distractors: int = 4
    distractor_prob: float = 0.2
    latent_dim: int = 16
    video_dim: int = 32
    text_dim: int = 24
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.clips_per_pair = tuple(self.clips_per_pair)
        self.frames_per_clip = tuple(self.frames_per_clip)
        self.tokens_per_sentence = tuple(self.tokens_per_sentence)
        self.gap_frames = tuple(self.gap_frames)
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.n_topics < 2:
            raise ValueError("n_topics must be at least 2")
        if self.clips_per_pair[0] < 1 or self.clips_per_pair[1] > self.n_topics:
            raise ValueError("clips_per_pair must lie in [1, n_topics]")
        if self.frames_per_clip[0] < 1 or self.tokens_per_sentence[0] < 1:
            raise ValueError("segments need at least one frame/token")
        if not 0.0 <= self.distractor_prob < 1.0:
            raise ValueError("distractor_prob must lie in [0, 1)")


@dataclass
class SynthWorld:
    """The fixed random structure shared by every pair of a synthetic dataset."""

    topic_centers: np.ndarray
    distractor_centers: np.ndarray
    video_map: np.ndarray
    text_map: np.ndarray


def make_world(cfg: SynthConfig) -> SynthWorld:
    rng = np.random.default_rng([cfg.seed, 0xC007])
    return SynthWorld(
        topic_centers=rng.standard_normal((cfg.n_topics, cfg.latent_dim)),
        distractor_centers=rng.standard_normal((cfg.n_distractors, cfg.latent_dim)),
        video_map=rng.standard_normal((cfg.latent_dim, cfg.video_dim)) / np.sqrt(cfg.latent_dim),
        text_map=rng.standard_normal((cfg.latent_dim, cfg.text_dim)) / np.sqrt(cfg.latent_dim),
    )


def _topic_sequences(cfg: SynthConfig) -> list[list[int]]:
    rng = np.random.default_rng([cfg.seed, 0x70C])
    seen, out = set(), []
    lo, hi = cfg.clips_per_pair
    while len(out) < cfg.n_pairs:
        n = int(rng.integers(lo, hi + 1))
        seq = tuple(int(t) for t in rng.choice(cfg.n_topics, size=n, replace=False))
        if seq in seen:
            continue
        seen.add(seq)
        out.append(list(seq))
    return out


def _emit(rng, latent, n, world_map, cfg, world):
    rows = np.repeat(latent[None, :], n, axis=0)
    distract = rng.random(n) < cfg.distractor_prob if cfg.distractor_prob > 0 else np.zeros(n, bool)
    if distract.any():
        which = rng.integers(0, len(world.distractor_centers), size=int(distract.sum()))
        rows[distract] = world.distractor_centers[which]
    return rows @ world_map + cfg.sigma * rng.standard_normal((n, world_map.shape[1]))


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset; per-pair RNG streams are keyed by (seed, index)."""
    world = make_world(cfg)
    topics = _topic_sequences(cfg)
    samples = []
    for k, seq in enumerate(topics):
        rng = np.random.default_rng([cfg.seed, 1, k])
        frames, clips = [], []
        tokens, sentences = [], []
        cursor, tcursor = 0, 0
        for i, topic in enumerate(seq):
            z = world.topic_centers[topic]
            if i > 0 and cfg.gap_frames[1] > 0:
                gap = int(rng.integers(cfg.gap_frames[0], cfg.gap_frames[1] + 1))
                if gap:
                    bg = world.distractor_centers[rng.integers(0, len(world.distractor_centers))]
                    frames.append(bg @ world.video_map
                                  + cfg.sigma * rng.standard_normal((gap, cfg.video_dim)))
                    cursor += gap
            nf = int(rng.integers(cfg.frames_per_clip[0], cfg.frames_per_clip[1] + 1))
            frames.append(_emit(rng, z, nf, world.video_map, cfg, world))
            clips.append((cursor, cursor + nf))
            cursor += nf
            nt = int(rng.integers(cfg.tokens_per_sentence[0], cfg.tokens_per_sentence[1] + 1))
            tokens.append(_emit(rng, z, nt, world.text_map, cfg, world))
            sentences.append((tcursor, tcursor + nt))
            tcursor += nt
        samples.append(Sample(
            id=f"pair{k:05d}", clips=clips, sentences=sentences,
            video=np.concatenate(frames).astype(np.float32),
            text=np.concatenate(tokens).astype(np.float32)))
    return Dataset(cfg.video_dim, cfg.text_dim, samples, topics)


def latent_nn_accuracy(ds: Dataset, cfg: SynthConfig) -> float:
    """Pair-identity accuracy of a 1-NN matcher working in latent space.

    Both modalities are mapped back to latent space by least squares, averaged
    per segment and concatenated; each video is matched to the nearest
    paragraph with the same segment count.
    """
    world = make_world(cfg)
    pv, pt = np.linalg.pinv(world.video_map), np.linalg.pinv(world.text_map)

    def code(blob, ranges, pinv):
        lat = blob.astype(np.float64) @ pinv
        return np.concatenate([lat[s:e].mean(axis=0) for s, e in ranges])

    vids = [code(s.video, s.clips, pv) for s in ds.samples]
    pars = [code(s.text, s.sentences, pt) for s in ds.samples]
    correct = 0
    for k, v in enumerate(vids):
        best, best_d = -1, np.inf
        for j, p in enumerate(pars):
            if p.shape != v.shape:
                continue
            dist = float(((v - p) ** 2).sum())
            if dist < best_d:
                best, best_d = j, dist
        correct += best == k
    return correct / len(vids)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def _paths(prefix) -> tuple[str, str, str]:
    prefix = os.fspath(prefix)
    return f"{prefix}.manifest.json", f"{prefix}.video.f32", f"{prefix}.text.f32"


def write_dataset(ds: Dataset, prefix, overwrite: bool = True) -> list[str]:
    paths = _paths(prefix)
    if not overwrite:
        existing = [p for p in paths if os.path.exists(p)]
        if existing:
            raise FileExistsError(f"refusing to overwrite {existing[0]}")
    entries, voff, toff = [], 0, 0
    for s in ds.samples:
        entries.append({"id": s.id, "clips": [list(map(int, c)) for c in s.clips],
                        "sentences": [list(map(int, c)) for c in s.sentences],
                        "video_offset": voff, "text_offset": toff})
        voff += s.video.shape[0]
        toff += s.text.shape[0]
    manifest = {"version": MANIFEST_VERSION, "video_dim": ds.video_dim,
                "text_dim": ds.text_dim, "samples": entries}
    with open(paths[0], "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    for path, blobs in ((paths[1], [s.video for s in ds.samples]),
                        (paths[2], [s.text for s in ds.samples])):
        with open(path, "wb") as fh:
            for b in blobs:
                fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return list(paths)


def read_dataset(prefix) -> Dataset:
    mpath, vpath, tpath = _paths(prefix)
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    vd, td = int(manifest["video_dim"]), int(manifest["text_dim"])
    video = np.fromfile(vpath, dtype="<f4").reshape(-1, vd)
    text = np.fromfile(tpath, dtype="<f4").reshape(-1, td)
    entries = manifest["samples"]
    samples = []
    for k, e in enumerate(entries):
        v_end = entries[k + 1]["video_offset"] if k + 1 < len(entries) else video.shape[0]
        t_end = entries[k + 1]["text_offset"] if k + 1 < len(entries) else text.shape[0]
        s = Sample(e["id"], [tuple(c) for c in e["clips"]], [tuple(c) for c in e["sentences"]],
                   video[e["video_offset"]:v_end].astype(np.float32),
                   text[e["text_offset"]:t_end].astype(np.float32))
        for a, b in s.clips:
            if not 0 <= a < b <= s.video.shape[0]:
                raise ValueError(f"{s.id}: clip range [{a},{b}) outside video extent")
        for a, b in s.sentences:
            if not 0 <= a < b <= s.text.shape[0]:
                raise ValueError(f"{s.id}: sentence range [{a},{b}) outside text extent")
        samples.append(s)
    return Dataset(vd, td, samples)


# ---------------------------------------------------------------------------
# frame sampling and clip boundaries
# ---------------------------------------------------------------------------

def sample_frames(start: int, end: int, max_count: int = MAX_FRAMES, mode: str = "eval",
                  rng: np.random.Generator | None = None) -> np.ndarray:
    """Indices of at most ``max_count`` frames from ``[start, end)``.

    Longer ranges are split into ``max_count`` equal intervals; training takes a
    uniform random frame from each, evaluation the floor of each midpoint.
    """
    length = end - start
    if length <= 0:
        raise ValueError("empty range")
    if length <= max_count:
        return np.arange(start, end)
    i = np.arange(max_count)
    if mode == "eval":
        return start + ((2 * i + 1) * length) // (2 * max_count)
    if mode != "train":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if rng is None:
        raise ValueError("train-mode sampling needs an rng")
    lo = (i * length) // max_count
    hi = ((i + 1) * length) // max_count
    return start + lo + (rng.random(max_count) * (hi - lo)).astype(np.int64)


def expand_clip(start: int, end: int, min_len: int = 10, extent: int | None = None) -> tuple[int, int]:
    """Grow ``[start, end)`` one frame at a time, end side first, to ``min_len``."""
    if extent is None:
        extent = end
    if not 0 <= start < end <= extent:
        raise ValueError(f"range [{start},{end}) outside extent {extent}")
    grow_end = True
    while end - start < min_len and (start > 0 or end < extent):
        if grow_end and end < extent:
            end += 1
        elif not grow_end and start > 0:
            start -= 1
        elif end < extent:
            end += 1
        else:
            start -= 1
        grow_end = not grow_end
    return start, end


def boundary_shift(rng: np.random.Generator, max_shift: int) -> int:
    """Uniform integer in ``[-max_shift, max_shift]`` (both ends inclusive)."""
    return int(rng.integers(-max_shift, max_shift + 1))


def inject_boundary_noise(start: int, end: int, fraction: float, extent: int,
                          rng: np.random.Generator, full: bool = False,
                          min_len: int = 1) -> tuple[int, int]:
    """Jitter both clip boundaries by up to ``extent * fraction`` frames.

    With ``full`` the range is replaced by a uniformly random valid range.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("noise fraction must lie in [0, 1]")
    if full:
        s = int(rng.integers(0, extent))
        e = int(rng.integers(s + 1, extent + 1))
        return expand_clip(s, e, min_len, extent)
    if fraction == 0.0:
        return start, end
    m = int(np.floor(extent * fraction))
    s = start + boundary_shift(rng, m)
    e = end + boundary_shift(rng, m)
    s = min(max(s, 0), extent)
    e = min(max(e, 0), extent)
    if s > e:
        s, e = e, s
    if s == e:
        if e < extent:
            e += 1
        else:
            s -= 1
    return expand_clip(s, e, min_len, extent)


def noisy_dataset(ds: Dataset, fraction: float, seed: int, full: bool = False) -> Dataset:
    """Copy of ``ds`` with boundary noise applied to every clip range."""
    samples = []
    for k, s in enumerate(ds.samples):
        rng = np.random.default_rng([seed, 2, k])
        clips = [inject_boundary_noise(a, b, fraction, s.n_frames, rng, full=full) for a, b in s.clips]
        samples.append(Sample(s.id, clips, list(s.sentences), s.video, s.text))
    return Dataset(ds.video_dim, ds.text_dim, samples, ds.topics)


def expand_dataset_clips(ds: Dataset, min_len: int = 10) -> Dataset:
    samples = [Sample(s.id, [expand_clip(a, b, min_len, s.n_frames) for a, b in s.clips],
                      list(s.sentences), s.video, s.text) for s in ds.samples]
    return Dataset(ds.video_dim, ds.text_dim, samples, ds.topics)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class BatchSide:
    """Padded arrays for one modality of a batch."""

    seg_feats: np.ndarray     # (S, T, D)
    seg_mask: np.ndarray      # (S, T)
    whole_feats: np.ndarray   # (B, Tw, D)
    whole_mask: np.ndarray    # (B, Tw)
    seg_index: np.ndarray     # (B, n_max), row into seg_feats or -1


@dataclass
class Batch:
    ids: list[str]
    video: BatchSide
    text: BatchSide
    owner: np.ndarray         # (S,) pair index of each aligned clip/sentence
    position: np.ndarray      # (S,) index within the pair

    @property
    def n_pairs(self) -> int:
        return len(self.ids)


def _pad(seqs: list[np.ndarray], dim: int) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    out = np.zeros((len(seqs), T, dim), dtype=np.float32)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
        mask[i, :len(s)] = True
    return out, mask


def _side(blobs, ranges_per_pair, dim, mode, rng, max_frames) -> BatchSide:
    segs, wholes = [], []
    counts = [len(r) for r in ranges_per_pair]
    for blob, ranges in zip(blobs, ranges_per_pair):
        for a, b in ranges:
            segs.append(blob[sample_frames(a, b, max_frames, mode, rng)])
        wholes.append(blob[sample_frames(0, blob.shape[0], max_frames, mode, rng)])
    seg_feats, seg_mask = _pad(segs, dim)
    whole_feats, whole_mask = _pad(wholes, dim)
    seg_index = np.full((len(counts), max(counts)), -1, dtype=np.int64)
    row = 0
    for k, n in enumerate(counts):
        seg_index[k, :n] = np.arange(row, row + n)
        row += n
    return BatchSide(seg_feats, seg_mask, whole_feats, whole_mask, seg_index)


def make_batch(ds: Dataset, pair_ids, mode: str = "eval", rng: np.random.Generator | None = None,
               max_frames: int = MAX_FRAMES) -> Batch:
    """Collect all clips and sentences of the given pairs into padded arrays."""
    lookup = ds._lookup()
    try:
        samples = [ds.samples[lookup[i]] for i in pair_ids]
    except KeyError as exc:
        raise KeyError(f"unknown sample id {exc.args[0]!r}") from None
    if not samples:
        raise ValueError("empty batch")
    for s in samples:
        if len(s.clips) != len(s.sentences):
            raise ValueError(f"{s.id}: {len(s.clips)} clips vs {len(s.sentences)} sentences")
    if len(samples) == 1:
        logger.warning("batch of one pair: alignment and clustering losses have no negatives")
    video = _side([s.video for s in samples], [s.clips for s in samples], ds.video_dim,
                  mode, rng, max_frames)
    text = _side([s.text for s in samples], [s.sentences for s in samples], ds.text_dim,
                 mode, rng, max_frames)
    owner = np.concatenate([np.full(len(s.clips), k) for k, s in enumerate(samples)])
    position = np.concatenate([np.arange(len(s.clips)) for s in samples])
    return Batch([s.id for s in samples], video, text, owner, position)


def synth_config_dict(cfg: SynthConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
