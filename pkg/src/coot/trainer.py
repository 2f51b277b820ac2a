"""Initialization, Adam with decoupled weight decay, LR schedule and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, make_batch
from .evaluation import evaluate, r1_sum
from .layers import ParameterStore
from .losses import LossConfig, total_loss
from .model import CootModel, ModelConfig

logger = logging.getLogger(__name__)

IMPROVEMENT_TOL = 1e-6


class DivergenceError(RuntimeError):
    """Raised when the loss or a gradient becomes non-finite."""

    def __init__(self, message, last_good_state=None, log=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.log = log or []


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-5
    warmup_epochs: int = 3
    rop_patience: int = 2
    rop_cooldown: int = 3
    rop_factor: float = 0.1
    early_stop_epochs: int = 15
    batch_size: int = 64
    max_epochs: int = 100
    feature_noise: float = 0.0
    init_std: float = 0.01
    eval_batch_size: int = 64
    metric_level: str = "high"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not 0 < self.rop_factor < 1:
            raise ValueError("rop_factor must lie in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be positive and max_epochs non-negative")
        if self.metric_level not in ("high", "low"):
            raise ValueError("metric_level must be 'high' or 'low'")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def truncated_normal(rng: np.random.Generator, shape, std: float = 0.01, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples, redrawing any beyond ``bound`` standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def init_params(store: ParameterStore, seed: int, std: float = 0.01) -> None:
    """Weights ~ truncated normal, biases 0, layer-norm gains 1."""
    rng = np.random.default_rng([seed, 0x1417])
    for name, t in store.items():
        kind = store.kinds[name]
        if kind == "weight":
            t.data = truncated_normal(rng, t.shape, std).astype(t.dtype)
        elif kind == "gain":
            t.data = np.ones(t.shape, dtype=t.dtype)
        else:
            t.data = np.zeros(t.shape, dtype=t.dtype)
        t.grad = None


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    lr: float = 0.0
    best_metric: float = -math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    bad_epochs: int = 0
    cooldown_left: int = 0
    reduced_lr: float | None = None
    stop: bool = False
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)


def optimizer_step(state: TrainState, params: ParameterStore, cfg: OptimConfig, lr: float | None = None) -> TrainState:
    """One Adam update with decoupled weight decay, using the gradients in ``params``."""
    lr = state.lr if lr is None else lr
    for name, p in params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise DivergenceError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p.data = p.data - (lr * cfg.weight_decay) * p.data
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.data = (p.data - update).astype(p.dtype)
    return state


def epoch_lr(state: TrainState, cfg: OptimConfig, epoch: int) -> float:
    """Learning rate to use during ``epoch`` (0-based)."""
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    return state.reduced_lr if state.reduced_lr is not None else cfg.lr


def schedule(state: TrainState, val_metric: float, cfg: OptimConfig) -> TrainState:
    """Record the end-of-epoch metric (higher is better) and update the plateau logic.

    ``state.epoch`` is advanced and ``state.lr`` set for the next epoch.
    """
    if not math.isfinite(val_metric):
        raise ValueError("validation metric must be finite")
    epoch = state.epoch
    improved = val_metric > state.best_metric + IMPROVEMENT_TOL
    if improved:
        state.best_metric = val_metric
        state.best_epoch = epoch
        state.epochs_since_improvement = 0
        state.bad_epochs = 0
    else:
        state.epochs_since_improvement += 1
        state.bad_epochs += 1
    in_warmup = epoch + 1 < cfg.warmup_epochs
    if state.cooldown_left > 0:
        state.cooldown_left -= 1
        state.bad_epochs = 0
    elif not in_warmup and state.bad_epochs >= cfg.rop_patience:
        current = epoch_lr(state, cfg, epoch + 1)
        state.reduced_lr = current * cfg.rop_factor
        state.bad_epochs = 0
        state.cooldown_left = cfg.rop_cooldown
        logger.info("epoch %d: reducing lr to %.3g", epoch + 1, state.reduced_lr)
    if state.epochs_since_improvement >= cfg.early_stop_epochs:
        state.stop = True
    state.epoch = epoch + 1
    state.lr = epoch_lr(state, cfg, state.epoch)
    return state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: CootModel
    log: list
    state: TrainState
    best_state: dict


def _mean_terms(rows: list[dict]) -> dict[str, float]:
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def _report_record(reports) -> dict:
    return {name: {"r1": r.r1, "r5": r.r5, "r10": r.r10, "r50": r.r50, "mr": r.median_rank}
            for name, r in reports.items()}


def train(train_ds: Dataset, model_cfg: ModelConfig, optim_cfg: OptimConfig,
          loss_cfg: LossConfig | None = None, seed: int = 0, val_ds: Dataset | None = None,
          log_path=None, on_epoch=None) -> TrainResult:
    """Train from scratch; keeps the parameters of the best validation epoch.

    Without ``val_ds`` the training set itself is used for model selection.
    """
    if len(train_ds) == 0:
        raise ValueError("empty training set")
    loss_cfg = loss_cfg or LossConfig()
    val_ds = val_ds if val_ds is not None else train_ds
    model = CootModel(model_cfg)
    init_params(model.params, seed, optim_cfg.init_std)
    rng = np.random.default_rng([seed, 0x7EA1])
    state = TrainState(lr=epoch_lr(TrainState(), optim_cfg, 0))
    best = model.params.state_dict()
    log: list[dict] = []
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(optim_cfg.max_epochs):
            model.train()
            ids = [train_ds.ids[i] for i in rng.permutation(len(train_ds))]
            rows = []
            for start in range(0, len(ids), optim_cfg.batch_size):
                batch = make_batch(train_ds, ids[start:start + optim_cfg.batch_size], "train", rng)
                try:
                    emb = model(batch, rng, optim_cfg.feature_noise)
                    loss, terms = total_loss(emb, loss_cfg, rng)
                    if not math.isfinite(terms["total"]):
                        raise FloatingPointError("non-finite loss")
                    model.params.zero_grad()
                    loss.backward()
                except FloatingPointError as exc:
                    raise DivergenceError(f"epoch {epoch}: {exc}", best, log) from None
                try:
                    optimizer_step(state, model.params, optim_cfg)
                except DivergenceError as exc:
                    raise DivergenceError(str(exc), best, log) from None
                rows.append(terms)
            model.eval()
            reports = evaluate(model, val_ds, optim_cfg.metric_level, "both", optim_cfg.eval_batch_size)
            metric = r1_sum(reports)
            record = {"epoch": epoch, "lr": state.lr, "loss": _mean_terms(rows),
                      **_report_record(reports), "metric": metric}
            schedule(state, metric, optim_cfg)
            if state.best_epoch == epoch:
                best = model.params.state_dict()
            log.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(record)
            if state.stop:
                logger.info("early stop after epoch %d", epoch)
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.params.load_state_dict(best)
    model.eval()
    return TrainResult(model, log, state, best)


def optim_config_dict(cfg: OptimConfig) -> dict:
    return asdict(cfg)
