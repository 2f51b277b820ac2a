"""Command-line entry point: ``coot gen|train|eval|gradcheck|ablate``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration or input error,
3 numerical divergence during training, 4 failed gradient check. Errors are
reported as a single JSON line on stderr.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .config import ConfigError, RunConfig

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4
THREADS_ENV = "COOT_THREADS"

logger = logging.getLogger("coot")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    # prefix matching would swallow dotted overrides such as --o.x
    def __init__(self, *args, **kwargs):
        kwargs["allow_abbrev"] = False
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, code: int, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")
    return code


def _thread_limit():
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"{THREADS_ENV} must be a non-negative integer, got {raw!r}")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    # a cap, never a raise: more BLAS threads than cores thrashes badly
    cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or n)
    return threadpool_limits(limits=min(n, cores))


def _load_run(args, extra_overrides: dict | None = None) -> RunConfig:
    run = cfgmod.load(args.config) if args.config else cfgmod.build()
    overrides = cfgmod.parse_override_args(args.overrides)
    overrides.update(extra_overrides or {})
    return cfgmod.apply_overrides(run, overrides) if overrides else run


def _guard(paths, force: bool):
    if force:
        return
    for p in paths:
        if os.path.exists(p):
            raise FileExistsError(f"refusing to overwrite {p} (use --force)")


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    from .data import _paths, generate_synthetic, write_dataset

    run = _load_run(args)
    config_path = f"{args.out}.config.json"
    _guard([*_paths(args.out), config_path], args.force)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic(run.synth())
    paths = write_dataset(ds, args.out, overwrite=True)
    _write_json(config_path, run.to_dict())
    print(json.dumps({"files": paths, "n_pairs": len(ds), "config": config_path}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import read_dataset
    from .evaluation import format_table, reports_json, retrieval, embed_dataset
    from .experiments import split_for_run
    from .model import CootModel, save_checkpoint
    from .trainer import DivergenceError, train

    extra = {"optim.max_epochs": args.max_epochs} if args.max_epochs is not None else {}
    run = _load_run(args, extra)
    out = Path(args.out)
    files = {k: out / v for k, v in (("ckpt", "model.ckpt"), ("log", "metrics.jsonl"),
                                     ("config", "config.json"), ("json", "report.json"),
                                     ("txt", "report.txt"))}
    _guard(files.values(), args.force)
    ds = read_dataset(args.data)
    train_ds, val_ds = split_for_run(run, ds, run.seed)
    model_cfg = run.model_config(ds.video_dim, ds.text_dim)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(files["config"], run.to_dict())
    meta = {"run": run.to_dict()}
    try:
        result = train(train_ds, model_cfg, run.optim_config(), run.loss_config(), seed=run.seed,
                       val_ds=val_ds, log_path=files["log"])
    except DivergenceError as exc:
        if exc.last_good_state is not None:
            model = CootModel(model_cfg)
            model.params.load_state_dict(exc.last_good_state)
            save_checkpoint(out / "model.last_good.ckpt", model, meta)
        return _fail("divergence", str(exc), EXIT_DIVERGED, epochs_logged=len(exc.log))
    save_checkpoint(files["ckpt"], result.model, meta)
    eval_ds = val_ds if val_ds is not None else train_ds
    emb = embed_dataset(result.model, eval_ds, run.eval["batch_size"])
    reports = retrieval(*emb.tables(run.eval["level"]), direction=run.eval["direction"])
    files["json"].write_text(reports_json(reports) + "\n")
    files["txt"].write_text(format_table(reports) + "\n")
    print(format_table(reports))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import read_dataset
    from .evaluation import embed_dataset, format_table, reports_json, retrieval
    from .model import load_checkpoint

    if args.level not in ("high", "low"):
        raise UsageError("--level must be high or low")
    if args.direction not in ("v2p", "p2v", "both"):
        raise UsageError("--direction must be v2p, p2v or both")
    model, _ = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    if (ds.video_dim, ds.text_dim) != (model.cfg.video_dim, model.cfg.text_dim):
        raise UsageError("dataset feature widths do not match the checkpoint")
    emb = embed_dataset(model, ds, args.batch_size)
    reports = retrieval(*emb.tables(args.level), direction=args.direction)
    if args.out:
        out = Path(args.out)
        _guard([out / "report.json", out / "report.txt", out / "eval_config.json"], args.force)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(reports_json(reports) + "\n")
        (out / "report.txt").write_text(format_table(reports) + "\n")
        _write_json(out / "eval_config.json",
                    {"checkpoint": str(args.checkpoint), "data": str(args.data), "level": args.level,
                     "direction": args.direction, "batch_size": args.batch_size})
    print(reports_json(reports) if args.json else format_table(reports))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    run = _load_run(args)
    report = run_gradcheck(seed=run.seed, init_std=args.init_std, h=args.step, tol=args.tol)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        _guard([args.out], args.force)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK if report["passed"] else EXIT_GRADCHECK


def cmd_ablate(args) -> int:
    from .experiments import parse_sweep, run_sweep, runs_table, summarize, write_csv

    run = _load_run(args)
    sweep_def = args.sweep
    if os.path.exists(sweep_def):
        try:
            sweep_def = json.loads(Path(sweep_def).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.sweep}: invalid JSON ({exc})") from None
    sweep, seeds = parse_sweep(sweep_def)
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",")]
        except ValueError:
            raise UsageError("--seeds must be a comma-separated list of integers") from None
    seeds = seeds or [run.seed]
    out = Path(args.out)
    runs_path = out.with_suffix(".runs.csv")
    config_path = out.with_suffix(".config.json")
    _guard([out, runs_path, config_path], args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(config_path, {"run": run.to_dict(), "sweep": sweep, "seeds": seeds})
    rows = run_sweep(run, sweep, seeds)
    write_csv(out, summarize(rows))
    write_csv(runs_path, runs_table(rows))
    print(out.read_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coot", description=__doc__.splitlines()[0],
                                epilog="Any config field can be overridden as --section.key VALUE.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="run configuration JSON (defaults if omitted)")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return sp

    sp = with_config(sub.add_parser("gen", help="generate a synthetic dataset"))
    sp.add_argument("--out", required=True, help="output prefix")
    sp.set_defaults(func=cmd_gen)

    sp = with_config(sub.add_parser("train", help="train a model on a dataset"))
    sp.add_argument("--data", required=True, help="dataset prefix")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--max-epochs", type=int, help="shortcut for --optim.max_epochs")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="retrieval metrics of a checkpoint on a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="dataset prefix")
    sp.add_argument("--level", default="high")
    sp.add_argument("--direction", default="both")
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--out", help="directory for report.json / report.txt")
    sp.add_argument("--json", action="store_true", help="print JSON instead of the table")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("gradcheck", help="end-to-end finite-difference check"))
    sp.add_argument("--init-std", type=float, default=0.2)
    sp.add_argument("--step", type=float, default=1e-3)
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.add_argument("--out", help="write the JSON report here too")
    sp.set_defaults(func=cmd_gradcheck)

    sp = with_config(sub.add_parser("ablate", help="sweep one setting, train per value and seed"))
    sp.add_argument("--sweep", required=True,
                    help="JSON file {sweep: {path: [values]}, seeds: [...]} or inline path=v1,v2")
    sp.add_argument("--seeds", help="comma-separated seeds (overrides the sweep file)")
    sp.add_argument("--out", required=True, help="summary CSV path")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_CONFIG)
    args.overrides = rest
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .trainer import DivergenceError

    try:
        if rest and args.command == "eval":
            raise UsageError(f"unexpected arguments {rest}")
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except (FileExistsError, FileNotFoundError, KeyError) as exc:
        return _fail("input", str(exc), EXIT_CONFIG)
    except (DivergenceError, FloatingPointError) as exc:
        return _fail("divergence", str(exc), EXIT_DIVERGED)
    except ValueError as exc:
        return _fail("input", str(exc), EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001 - last-resort report
        return _fail(type(exc).__name__, str(exc), EXIT_FAILURE)


if __name__ == "__main__":
    sys.exit(main())
