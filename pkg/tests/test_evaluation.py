import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coot.data import SynthConfig, generate_synthetic
from coot.evaluation import (EmbeddingTable, cycle_diagnostic, embed_dataset, format_table, rank_all, report,
                             reports_json, retrieval)
from coot.model import CootModel, ModelConfig
from coot.trainer import init_params
from oracles import brute_force_ranks, cycle_direction, softmax_rows


def _table(m, ids=None):
    return EmbeddingTable(list(range(len(m))) if ids is None else ids, np.asarray(m, float))


def test_identity_gallery_ranks_first():
    m = np.random.default_rng(0).standard_normal((12, 5))
    assert (rank_all(_table(m), _table(m)) == 1).all()


def test_closer_wrong_item_gives_rank_two():
    q = _table([[1.0, 0.1], [0.0, 1.0]])
    g = _table([[0.0, 1.0], [1.0, 0.0]])
    # query 0 is nearer gallery item 1, query 1 is nearer gallery item 0
    assert rank_all(q, g).tolist() == [2, 2]


@pytest.mark.parametrize("seed", range(100))
def test_ranks_match_brute_force_sort(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 15)), int(rng.integers(2, 9))
    q, g = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    ids = [f"id{i}" for i in range(n)]
    g_ids = [ids[j] for j in rng.permutation(n)]
    assert rank_all(_table(q, ids), _table(g, g_ids)).tolist() == brute_force_ranks(q, g, ids, g_ids)


def test_ties_break_by_gallery_index():
    g = _table([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    q = _table([[2.0, 0.0]] * 3)
    assert rank_all(q, g).tolist() == [1, 2, 3]


def test_rank_errors():
    with pytest.raises(ValueError):
        rank_all(_table(np.eye(2), ["a", "b"]), _table(np.eye(2), ["a", "c"]))
    with pytest.raises(ValueError, match="degenerate"):
        rank_all(_table([[0.0, 0.0], [1.0, 0.0]]), _table(np.eye(2)))


def test_rank_is_invariant_to_row_rescaling():
    rng = np.random.default_rng(1)
    q, g = rng.standard_normal((10, 4)), rng.standard_normal((10, 4))
    scale = rng.uniform(0.1, 10, (10, 1))
    assert rank_all(_table(q * scale), _table(g)).tolist() == rank_all(_table(q), _table(g)).tolist()


def test_report_hand_counts():
    r = report([1, 2, 6, 11])
    assert (r.r1, r.r5, r.r10, r.r50, r.median_rank) == (25.0, 50.0, 75.0, 100.0, 2.0)
    r = report([1, 1, 1, 1])
    assert (r.r1, r.median_rank) == (100.0, 1.0)
    r = report([51, 60, 99])
    assert r.r50 == 0.0 and r.median_rank == 60.0
    with pytest.raises(ValueError):
        report([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 200), min_size=1, max_size=60), st.randoms())
def test_report_properties(ranks, rnd):
    r = report(ranks)
    assert 0 <= r.r1 <= r.r5 <= r.r10 <= r.r50 <= 100 and r.median_rank >= 1
    assert r.median_rank == sorted(ranks)[(len(ranks) - 1) // 2]
    shuffled = list(ranks)
    rnd.shuffle(shuffled)
    assert report(shuffled).to_dict() == r.to_dict()


def test_retrieval_directions_and_output_formats():
    rng = np.random.default_rng(2)
    v, p = _table(rng.standard_normal((6, 3))), _table(rng.standard_normal((6, 3)))
    both = retrieval(v, p)
    assert list(both) == ["v2p", "p2v"]
    assert list(retrieval(v, p, "p2v")) == ["p2v"]
    with pytest.raises(ValueError):
        retrieval(v, p, "sideways")
    data = json.loads(reports_json(both))
    assert set(data["v2p"]) == {"r1", "r5", "r10", "r50", "median_rank", "direction"}
    lines = format_table(both).splitlines()
    assert lines[0].split() == ["direction", "R@1", "R@5", "R@10", "R@50", "MR"]
    assert len(lines) == 4 and len({len(line) for line in lines}) == 1


def test_self_retrieval_is_perfect():
    m = np.random.default_rng(3).standard_normal((9, 4))
    for rep in retrieval(_table(m), _table(m)).values():
        assert rep.r1 == 100.0 and rep.median_rank == 1.0


def test_cycle_diagnostic_cases():
    rows = 10.0 * np.eye(6)[:5]
    assert cycle_diagnostic([(rows, rows.copy())])["mean"] <= 1e-4
    one = np.ones((1, 3))
    assert cycle_diagnostic([(one, 2 * one)]) == {"t2v": 0.0, "v2t": 0.0, "mean": 0.0}


def test_cycle_diagnostic_matches_oracle():
    rng = np.random.default_rng(4)
    clips, sents = rng.standard_normal((8, 5)), rng.standard_normal((8, 5))
    got = cycle_diagnostic([(clips, sents)])

    def abs_errors(src, dst):
        out = []
        for i in range(len(src)):
            nn = softmax_rows(-((dst - src[i]) ** 2).sum(1)) @ dst
            out.append(abs(i - float(softmax_rows(-((src - nn) ** 2).sum(1)) @ np.arange(len(src)))))
        return np.array(out)

    t2v, v2t = abs_errors(sents, clips), abs_errors(clips, sents)
    assert got["t2v"] == pytest.approx(t2v.mean(), abs=1e-6)
    assert got["v2t"] == pytest.approx(v2t.mean(), abs=1e-6)
    assert got["mean"] == pytest.approx(np.r_[t2v, v2t].mean(), abs=1e-6)
    # squared errors agree with the loss oracle
    assert (t2v ** 2).mean() == pytest.approx(cycle_direction(sents, clips), abs=1e-9)


def test_embed_dataset_levels_and_batching():
    ds = generate_synthetic(SynthConfig(n_pairs=7, clips_per_pair=(1, 1), frames_per_clip=(2, 4),
                                        tokens_per_sentence=(2, 3), video_dim=6, text_dim=5, latent_dim=4,
                                        n_topics=8))
    model = CootModel(ModelConfig(6, 5, d=16, heads=2, max_len=16, max_segments=2))
    init_params(model.params, 0, 0.2)
    emb = embed_dataset(model, ds, batch_size=3)
    assert emb.videos.shape == (7, 32) and len(emb.clips) == 7
    low_v, low_p = emb.tables("low")
    high_v, _ = emb.tables("high")
    assert len(low_v.ids) == len(high_v.ids) == 7
    with pytest.raises(ValueError):
        emb.tables("mid")
    # one clip per pair means every batch has the same padded length, so chunking is invisible
    whole = embed_dataset(model, ds, batch_size=64)
    np.testing.assert_allclose(emb.videos, whole.videos, atol=1e-5)
    assert not model.training
