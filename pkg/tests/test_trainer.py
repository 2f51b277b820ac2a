import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import truncnorm

from coot.data import SynthConfig, generate_synthetic, make_batch
from coot.evaluation import evaluate
from coot.layers import LayerNorm, Linear, ParameterStore
from coot.losses import LossConfig, total_loss
from coot.model import CootModel, ModelConfig, load_checkpoint, save_checkpoint
from coot.numcore import Tensor
from oracles import simulate_schedule
from coot.trainer import (DivergenceError, OptimConfig, TrainState, epoch_lr, init_params, optimizer_step,
                          schedule, train, truncated_normal)

SMALL = SynthConfig(n_pairs=12, clips_per_pair=(2, 3), frames_per_clip=(2, 4), tokens_per_sentence=(2, 3),
                    video_dim=6, text_dim=5, latent_dim=4, n_topics=8, seed=2)


def _model_cfg(**kw):
    kw.setdefault("dropout", 0.1)
    return ModelConfig(6, 5, d=16, heads=2, max_len=16, max_segments=4, **kw)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _store():
    store = ParameterStore()
    Linear(store, "big", 400, 300)
    LayerNorm(store, "ln", 300)
    return store


def test_truncated_normal_init():
    store = _store()
    init_params(store, seed=0)
    w = store["big.weight"].data
    assert w.size >= 1e5 and np.abs(w).max() <= 0.02
    assert 0.0085 <= w.std() <= 0.0095
    # agreement with the analytic std of a normal truncated at two standard deviations
    assert w.std() == pytest.approx(truncnorm.std(-2, 2, scale=0.01), rel=0.01)
    assert (store["big.bias"].data == 0).all()
    assert (store["ln.gain"].data == 1).all() and (store["ln.bias"].data == 0).all()


def test_init_matches_a_rejection_sampling_oracle():
    rng = np.random.default_rng(5)
    draws = rng.normal(0, 0.01, 400_000)
    oracle = draws[np.abs(draws) <= 0.02][:120_000]
    ours = truncated_normal(np.random.default_rng(6), 120_000)
    assert abs(ours.std() - oracle.std()) <= 0.02 * oracle.std()
    assert abs(np.abs(ours).mean() - np.abs(oracle).mean()) <= 0.02 * np.abs(oracle).mean()


def test_init_is_seeded():
    a, b, c = _store(), _store(), _store()
    init_params(a, 3)
    init_params(b, 3)
    init_params(c, 4)
    assert a["big.weight"].data.tobytes() == b["big.weight"].data.tobytes()
    assert a["big.weight"].data.tobytes() != c["big.weight"].data.tobytes()


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def _scalar_store(value=0.5):
    store = ParameterStore()
    p = store.create("w", (1,))
    p.data = np.array([value], dtype=np.float64)
    return store, p


def test_zero_gradient_without_decay_keeps_parameters():
    store, p = _scalar_store()
    p.grad = np.zeros(1)
    cfg = OptimConfig(weight_decay=0.0)
    state = TrainState(lr=0.1)
    for _ in range(3):
        optimizer_step(state, store, cfg)
    assert p.data[0] == 0.5


def test_first_adam_step_moves_by_lr():
    store, p = _scalar_store(0.0)
    p.grad = np.ones(1)
    optimizer_step(TrainState(lr=0.1), store, OptimConfig(weight_decay=0.0))
    assert p.data[0] == pytest.approx(-0.1, abs=1e-8)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal((6, 3))
    cfg = OptimConfig(lr=0.05, weight_decay=0.1)
    store = ParameterStore()
    p = store.create("w", (3,))
    p.data = np.array([0.3, -0.2, 1.0])
    w, m, v = p.data.copy(), np.zeros(3), np.zeros(3)
    state = TrainState(lr=cfg.lr)
    for t, g in enumerate(grads, start=1):
        p.grad = g.copy()
        optimizer_step(state, store, cfg)
        w = w - cfg.lr * cfg.weight_decay * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - cfg.lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, w, rtol=1e-12, atol=1e-15)


def test_identical_states_give_identical_steps():
    results = []
    for _ in range(2):
        store, p = _scalar_store()
        state = TrainState(lr=0.01)
        for g in (0.3, -1.2, 0.7):
            p.grad = np.array([g])
            optimizer_step(state, store, OptimConfig())
        results.append(p.data.tobytes())
    assert results[0] == results[1]


def test_non_finite_gradient_aborts_the_step():
    store, p = _scalar_store()
    p.grad = np.array([np.nan])
    state = TrainState(lr=0.1)
    with pytest.raises(DivergenceError):
        optimizer_step(state, store, OptimConfig())
    assert p.data[0] == 0.5 and state.step == 0


@pytest.mark.parametrize("bad", [{"lr": 0}, {"beta1": 1.0}, {"rop_factor": 1.0}, {"batch_size": 0},
                                 {"max_epochs": -1}, {"metric_level": "mid"}])
def test_invalid_optim_config(bad):
    with pytest.raises(ValueError):
        OptimConfig(**bad)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def run_schedule(metrics, cfg):
    state = TrainState(lr=epoch_lr(TrainState(), cfg, 0))
    lrs = []
    for e, m in enumerate(metrics):
        lrs.append(state.lr)
        schedule(state, m, cfg)
        if state.stop:
            return lrs, e
    return lrs, None


def test_warmup_ramp():
    cfg = OptimConfig(lr=1e-3, warmup_epochs=3)
    lrs, _ = run_schedule([1, 2, 3, 4], cfg)
    np.testing.assert_allclose(lrs, [1e-3 / 3, 2e-3 / 3, 1e-3, 1e-3], rtol=1e-12)
    assert lrs[0] == pytest.approx(3.33e-4, abs=1e-6) and lrs[1] == pytest.approx(6.67e-4, abs=1e-6)


def test_reduction_after_patience():
    cfg = OptimConfig(lr=1e-3, warmup_epochs=0, rop_patience=2, rop_cooldown=0)
    lrs, _ = run_schedule([5, 5, 5, 5], cfg)
    assert lrs[:3] == [1e-3] * 3
    assert lrs[3] == pytest.approx(1e-4, rel=1e-12)


def test_early_stop_after_fifteen_flat_epochs():
    cfg = OptimConfig(warmup_epochs=0)
    _, stop = run_schedule([1.0] + [1.0] * 30, cfg)
    assert stop == 15
    # a tiny gain below the tolerance does not count as improvement
    _, stop = run_schedule([1.0 + 1e-8 * i for i in range(40)], cfg)
    assert stop == 15


def test_non_finite_metric_rejected():
    with pytest.raises(ValueError):
        schedule(TrainState(), float("nan"), OptimConfig())


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=40), st.integers(0, 4), st.integers(1, 4),
       st.integers(0, 3), st.integers(2, 8))
def test_schedule_matches_simulation(metrics, warmup, patience, cooldown, stop_after):
    cfg = OptimConfig(lr=1e-3, warmup_epochs=warmup, rop_patience=patience, rop_cooldown=cooldown,
                      early_stop_epochs=stop_after)
    metrics = [float(m) for m in metrics]
    got_lrs, got_stop = run_schedule(metrics, cfg)
    want_lrs, want_stop = simulate_schedule(metrics, 1e-3, warmup, patience, cooldown, 0.1, stop_after)
    np.testing.assert_allclose(got_lrs, want_lrs, rtol=1e-12)
    assert got_stop == want_stop
    after = got_lrs[warmup:]
    assert all(b <= a for a, b in zip(after, after[1:]))
    if got_stop is not None:
        best = int(np.argmax(np.array(metrics[:got_stop + 1]) - 1e-9 * np.arange(got_stop + 1)))
        assert got_stop - best <= stop_after


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_zero_epochs_returns_initialized_model():
    ds = generate_synthetic(SMALL)
    result = train(ds, _model_cfg(), OptimConfig(max_epochs=0), seed=1)
    assert result.log == []
    fresh = CootModel(_model_cfg())
    init_params(fresh.params, 1)
    for name in fresh.params.names():
        assert result.model.params[name].data.tobytes() == fresh.params[name].data.tobytes()


def test_metric_log_is_bit_identical_across_runs(tmp_path):
    ds = generate_synthetic(SMALL)
    train_ds, val_ds = ds.split(8)
    cfg = OptimConfig(max_epochs=3, batch_size=4, init_std=0.05)
    for name in ("a", "b"):
        train(train_ds, _model_cfg(), cfg, LossConfig(), seed=7, val_ds=val_ds, log_path=tmp_path / name)
    a, b = (tmp_path / "a").read_bytes(), (tmp_path / "b").read_bytes()
    assert a == b
    records = [json.loads(line) for line in a.decode().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1, 2]
    assert {"lr", "loss", "v2p", "p2v", "metric"} <= set(records[0])
    assert set(records[0]["v2p"]) == {"r1", "r5", "r10", "r50", "mr"}


def test_checkpoint_reproduces_validation_metrics(tmp_path):
    ds = generate_synthetic(SMALL)
    train_ds, val_ds = ds.split(8)
    result = train(train_ds, _model_cfg(), OptimConfig(max_epochs=3, batch_size=4, init_std=0.05),
                   seed=3, val_ds=val_ds)
    best = result.log[result.state.best_epoch]
    save_checkpoint(tmp_path / "m.ckpt", result.model)
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    reports = evaluate(loaded, val_ds)
    assert {d: reports[d].r1 for d in reports} == {d: best[d]["r1"] for d in ("v2p", "p2v")}


def test_zero_cmc_weight_step_equals_step_without_cmc():
    ds = generate_synthetic(SMALL)
    batch = make_batch(ds, ds.ids[:4], "train", np.random.default_rng(0))
    out = []
    for loss_cfg in (LossConfig(cmc_weight=0.0), LossConfig(cmc=False)):
        model = CootModel(_model_cfg()).train()
        init_params(model.params, 0, 0.05)
        loss, _ = total_loss(model(batch, np.random.default_rng(1)), loss_cfg)
        model.params.zero_grad()
        loss.backward()
        optimizer_step(TrainState(lr=1e-3), model.params, OptimConfig())
        out.append(b"".join(p.data.tobytes() for _, p in model.params.items()))
    assert out[0] == out[1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_last_good_parameters():
    ds = generate_synthetic(SMALL)
    with pytest.raises(DivergenceError) as info:
        train(ds, _model_cfg(), OptimConfig(lr=1e30, warmup_epochs=0, max_epochs=5, batch_size=4), seed=0)
    state = info.value.last_good_state
    assert state is not None and all(np.isfinite(v).all() for v in state.values())


def test_empty_training_set_rejected():
    ds = generate_synthetic(SMALL)
    with pytest.raises(ValueError):
        train(ds.subset([]), _model_cfg(), OptimConfig())


def test_feature_noise_changes_training_but_not_evaluation():
    ds = generate_synthetic(SMALL)
    batch = make_batch(ds, ds.ids[:3])
    model = CootModel(_model_cfg(dropout=0.0))
    init_params(model.params, 0, 0.2)
    clean = model(batch).videos.data
    assert np.array_equal(model(batch, np.random.default_rng(0), feature_noise=1.0).videos.data, clean)
    model.train()
    noisy = model(batch, np.random.default_rng(0), feature_noise=1.0).videos.data
    assert not np.allclose(noisy, clean)
    assert isinstance(model(batch).videos, Tensor)
