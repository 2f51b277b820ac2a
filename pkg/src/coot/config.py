"""Run configuration: one JSON document covering data, model, losses, optimizer and eval.

Every field of the module configs can be set from the file or overridden on
the command line with a dotted path (``--optim.lr 3e-4``). Unknown keys and
ill-typed values are rejected before any work starts.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass

from .data import SynthConfig, synth_config_dict
from .layers import PoolingMode
from .losses import LossConfig
from .model import ModelConfig
from .trainer import OptimConfig


class ConfigError(ValueError):
    """Invalid run configuration."""


# extra data-section keys that are not part of the generator config
DATA_EXTRAS = {"val_pairs": 0, "boundary_noise": 0.0, "boundary_noise_full": False}
EVAL_DEFAULTS = {"level": "high", "direction": "both", "batch_size": 64}
SECTION_ALIASES = {"loss": "losses"}
KEY_ALIASES = {
    "losses": {"cmc.lambda": "cmc_weight", "lambda": "cmc_weight", "cmc.weight": "cmc_weight"},
}
MODEL_DATA_KEYS = ("video_dim", "text_dim")


def _model_defaults() -> dict:
    d = asdict(ModelConfig(video_dim=1, text_dim=1))
    for k in MODEL_DATA_KEYS:
        d[k] = None
    return d


def default_config() -> dict:
    return {
        "data": {**synth_config_dict(SynthConfig()), **DATA_EXTRAS},
        "model": _model_defaults(),
        "losses": asdict(LossConfig()),
        "optim": asdict(OptimConfig()),
        "eval": dict(EVAL_DEFAULTS),
        "seed": 0,
    }


@dataclass
class RunConfig:
    data: dict
    model: dict
    losses: dict
    optim: dict
    eval: dict
    seed: int = 0

    # -- typed views -----------------------------------------------------
    def synth(self) -> SynthConfig:
        return SynthConfig(**{k: v for k, v in self.data.items() if k not in DATA_EXTRAS})

    def model_config(self, video_dim: int | None = None, text_dim: int | None = None) -> ModelConfig:
        m = dict(self.model)
        m["video_dim"] = m["video_dim"] or video_dim or self.data["video_dim"]
        m["text_dim"] = m["text_dim"] or text_dim or self.data["text_dim"]
        return ModelConfig(**m)

    def loss_config(self) -> LossConfig:
        return LossConfig(**self.losses)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(**self.optim)

    def to_dict(self) -> dict:
        return {"data": self.data, "model": self.model, "losses": self.losses,
                "optim": self.optim, "eval": self.eval, "seed": self.seed}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _check_value(path: str, value, default):
    """Coerce ``value`` to the type implied by ``default``; raise on mismatch."""
    if default is None:
        if value is None or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{path}: expected an integer or null, got {value!r}")
    if value is None:
        raise ConfigError(f"{path}: null not allowed")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, (tuple, list)):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{path}: expected a list of {len(default)} values, got {value!r}")
        return [_check_value(f"{path}[{i}]", v, d) for i, (v, d) in enumerate(zip(value, default))]
    if isinstance(default, dict):
        if isinstance(value, str):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object or a name, got {value!r}")
        return dict(value)
    return value


def _merge(section: str, base: dict, update: dict) -> dict:
    if not isinstance(update, dict):
        raise ConfigError(f"{section}: expected an object")
    out = dict(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown key {section}.{key}")
        out[key] = _check_value(f"{section}.{key}", value, base[key])
    return out


def build(raw: dict | None = None) -> RunConfig:
    """Merge ``raw`` over the defaults and validate every section."""
    cfg = default_config()
    raw = copy.deepcopy(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key, value in raw.items():
        section = SECTION_ALIASES.get(key, key)
        if section not in cfg:
            raise ConfigError(f"unknown section {key!r}")
        if section == "seed":
            cfg["seed"] = _check_value("seed", value, 0)
        else:
            cfg[section] = _merge(section, cfg[section], value)
    run = RunConfig(**cfg)
    validate(run)
    return run


def validate(run: RunConfig) -> None:
    """Instantiate every module config so their own checks run up front."""
    try:
        run.synth()
        mc = run.model_config()
        mc.branch("video")
        mc.branch("text")
        run.loss_config()
        run.optim_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if run.eval["level"] not in ("high", "low"):
        raise ConfigError("eval.level must be 'high' or 'low'")
    if run.eval["direction"] not in ("v2p", "p2v", "both"):
        raise ConfigError("eval.direction must be 'v2p', 'p2v' or 'both'")
    if run.eval["batch_size"] < 1:
        raise ConfigError("eval.batch_size must be positive")
    if not 0 <= run.data["val_pairs"] < run.data["n_pairs"]:
        raise ConfigError("data.val_pairs must lie in [0, n_pairs)")
    if not 0.0 <= run.data["boundary_noise"] <= 1.0:
        raise ConfigError("data.boundary_noise must lie in [0, 1]")


def load(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return build(raw)


# ---------------------------------------------------------------------------
# dotted overrides
# ---------------------------------------------------------------------------

def parse_value(text: str):
    """Command-line value: on/off and true/false are booleans, JSON otherwise, else a string."""
    low = text.strip().lower()
    if low in ("on", "true", "yes"):
        return True
    if low in ("off", "false", "no"):
        return False
    if low in ("null", "none"):
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_path(dotted: str) -> tuple[str, str]:
    """``loss.cmc.lambda`` -> (``losses``, ``cmc_weight``)."""
    section, _, rest = dotted.partition(".")
    section = SECTION_ALIASES.get(section, section)
    if section == "seed" and not rest:
        return "seed", ""
    if not rest:
        raise ConfigError(f"override {dotted!r} needs a section and a key")
    rest = KEY_ALIASES.get(section, {}).get(rest, rest)
    return section, rest


def apply_overrides(run: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{dotted.path: value}`` pairs and re-validate."""
    raw = copy.deepcopy(run.to_dict())
    for dotted, value in overrides.items():
        section, key = resolve_path(dotted)
        if section not in raw:
            raise ConfigError(f"unknown section in override {dotted!r}")
        if section == "seed":
            raw["seed"] = value
            continue
        head, _, tail = key.partition(".")
        if head not in raw[section]:
            raise ConfigError(f"unknown key {section}.{head}")
        if tail:
            # nested object field, e.g. model.high_pool.kind
            target = raw[section][head]
            if isinstance(target, str):
                target = asdict(PoolingMode.parse(target))
            if not isinstance(target, dict) or tail not in target:
                raise ConfigError(f"unknown key {dotted}")
            target = dict(target)
            target[tail] = value
            raw[section][head] = target
        else:
            raw[section][head] = value
    return build(raw)


def parse_override_args(args: list[str]) -> dict:
    """``['--optim.lr', '3e-4', '--loss.cmc=off']`` -> ``{'optim.lr': 3e-4, 'loss.cmc': False}``."""
    out = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or len(arg) < 3:
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"override {arg} needs a value")
            value = args[i + 1]
            i += 2
        if "." not in key and key != "seed":
            raise ConfigError(f"unknown option {arg!r}")
        out[key] = parse_value(value)
    return out

