"""Train/evaluate runs driven by a RunConfig, and setting sweeps over them."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, apply_overrides
from .data import Dataset, generate_synthetic, noisy_dataset
from .evaluation import cycle_diagnostic, embed_dataset
from .trainer import TrainResult, train

logger = logging.getLogger(__name__)


def split_for_run(run: RunConfig, ds: Dataset, seed: int) -> tuple[Dataset, Dataset | None]:
    """Hold out the last ``data.val_pairs`` pairs; boundary noise touches the training part only."""
    n_val = run.data["val_pairs"]
    if n_val >= len(ds):
        raise ValueError(f"val_pairs={n_val} leaves no training pairs")
    train_ds, val_ds = ds.split(len(ds) - n_val) if n_val else (ds, None)
    noise = run.data["boundary_noise"]
    if noise > 0 or run.data["boundary_noise_full"]:
        train_ds = noisy_dataset(train_ds, noise, seed, full=run.data["boundary_noise_full"])
    return train_ds, val_ds


def train_run(run: RunConfig, ds: Dataset, log_path=None, seed: int | None = None
              ) -> tuple[TrainResult, Dataset]:
    seed = run.seed if seed is None else seed
    train_ds, val_ds = split_for_run(run, ds, seed)
    result = train(train_ds, run.model_config(ds.video_dim, ds.text_dim), run.optim_config(),
                   run.loss_config(), seed=seed, val_ds=val_ds, log_path=log_path)
    return result, (val_ds if val_ds is not None else train_ds)


def held_out_metrics(result: TrainResult, eval_ds: Dataset, batch_size: int = 64) -> dict[str, float]:
    """High/low-level R@1 and R@5 both directions plus the cycle diagnostic."""
    from .evaluation import retrieval

    emb = embed_dataset(result.model, eval_ds, batch_size)
    out = {}
    for level in ("high", "low"):
        reports = retrieval(*emb.tables(level))
        prefix = "" if level == "high" else "low_"
        for direction, rep in reports.items():
            out[f"{prefix}{direction}_r1"] = rep.r1
            out[f"{prefix}{direction}_r5"] = rep.r5
    out["cycle"] = cycle_diagnostic(zip(emb.clips, emb.sentences))["mean"]
    out["best_epoch"] = result.state.best_epoch
    return out


@dataclass
class SweepRow:
    setting: str
    value: object
    seed: int
    metrics: dict


def parse_sweep(sweep_def) -> tuple[dict[str, list], list[int] | None]:
    """Accept ``{"sweep": {path: [values]}, "seeds": [...]}`` or inline ``path=v1,v2``."""
    from .config import ConfigError, parse_value

    if isinstance(sweep_def, str):
        if "=" not in sweep_def:
            raise ConfigError(f"sweep {sweep_def!r} must look like path=v1,v2,...")
        path, values = sweep_def.split("=", 1)
        return {path: [parse_value(v) for v in values.split(",")]}, None
    if not isinstance(sweep_def, dict) or not isinstance(sweep_def.get("sweep"), dict):
        raise ConfigError("a sweep definition needs a 'sweep' object of path -> list of values")
    unknown = set(sweep_def) - {"sweep", "seeds"}
    if unknown:
        raise ConfigError(f"unknown sweep keys {sorted(unknown)}")
    for path, values in sweep_def["sweep"].items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep values for {path} must be a nonempty list")
    seeds = sweep_def.get("seeds")
    if seeds is not None and (not isinstance(seeds, list) or not seeds):
        raise ConfigError("seeds must be a nonempty list")
    return sweep_def["sweep"], seeds


def run_sweep(run: RunConfig, sweep: dict[str, list], seeds: list[int]) -> list[SweepRow]:
    """Train once per (setting value, seed) on a freshly generated synthetic dataset."""
    # validate every setting before spending time on training
    variants = [(path, value, apply_overrides(run, {path: value}))
                for path, values in sweep.items() for value in values]
    rows = []
    datasets: dict[str, Dataset] = {}
    for path, value, variant in variants:
        key = repr(sorted(variant.data.items()))
        if key not in datasets:
            datasets[key] = generate_synthetic(variant.synth())
        ds = datasets[key]
        for seed in seeds:
            start = time.perf_counter()
            result, eval_ds = train_run(variant, ds, seed=seed)
            metrics = held_out_metrics(result, eval_ds, variant.eval["batch_size"])
            logger.info("%s=%s seed %d: %s (%.1fs)", path, value, seed, metrics,
                        time.perf_counter() - start)
            rows.append(SweepRow(path, value, seed, metrics))
    return rows


def summarize(rows: list[SweepRow]) -> list[dict]:
    """Mean and population std of every metric over seeds, one row per setting value."""
    groups: dict[tuple, list[SweepRow]] = {}
    for r in rows:
        groups.setdefault((r.setting, repr(r.value)), []).append(r)
    out = []
    for (setting, _), members in groups.items():
        row = {"setting": setting, "value": members[0].value, "n_seeds": len(members)}
        for name in members[0].metrics:
            vals = np.array([m.metrics[name] for m in members], dtype=np.float64)
            row[f"{name}_mean"] = float(vals.mean())
            row[f"{name}_std"] = float(vals.std())
        out.append(row)
    return out


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


def runs_table(rows: list[SweepRow]) -> list[dict]:
    return [{"setting": r.setting, "value": r.value, "seed": r.seed, **r.metrics} for r in rows]
