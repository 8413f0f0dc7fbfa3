"""Declarative recipe configuration (TOML).

Example (paths are relative to the config file)::

    seed = 0

    [model]
    vocab_size = 512
    d_model = 128

    [data]
    manifest = "toy/manifest.json"

    [mixture]
    temperature = 6.0
    pinned = {}

    [stage1]
    peak_lr = 2e-3
    token_budget = 2000000

    [stage2]
    trainable = "lora"

    [eval]
    beam = 5

Every section is optional except ``data``; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .datamix import ConfigError
from .model import ModelConfig
from .trainer import Corpora, EvalSettings, TrainConfig

SEED_ENV = "ALMAFORGE_SEED"

DATA_KEYS = ("manifest", "vocab", "mono", "train", "valid", "test", "languages", "directions")
MIXTURE_KEYS = ("temperature", "pinned")
SWEEP_KEYS = ("sizes", "from_scratch")
TOP_KEYS = ("seed", "out_dir", "model", "data", "mixture", "stage1", "stage2", "eval", "sweep")
# seed and stage are set by the recipe, not per section
STAGE_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name not in ("seed", "stage"))
MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))
EVAL_KEYS = tuple(f.name for f in dataclasses.fields(EvalSettings))


def documented_keys():
    """Section -> accepted keys (rendered into ``--help``)."""
    return {"(top level)": ("seed", "out_dir"), "model": MODEL_KEYS, "data": DATA_KEYS, "mixture": MIXTURE_KEYS,
            "stage1": STAGE_KEYS, "stage2": STAGE_KEYS, "eval": EVAL_KEYS, "sweep": SWEEP_KEYS}


@dataclass
class RecipeConfig:
    seed: int
    model: ModelConfig
    corpora: Corpora
    mixture: dict
    stage1: TrainConfig
    stage2: TrainConfig
    evaluation: EvalSettings
    sweep: dict = field(default_factory=dict)
    out_dir: str | None = None
    source: str | None = None


def _check_keys(section, table, allowed):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    for key in table:
        if key not in allowed:
            where = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown config key {where!r} (allowed: {', '.join(allowed)})")


def _build(section, cls, table, **fixed):
    try:
        return cls(**table, **fixed)
    except ConfigError as exc:
        raise ConfigError(f"[{section}] {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] invalid value: {exc}") from None


def _resolve(base: Path, p):
    return str(p) if Path(p).is_absolute() else str((base / p).resolve())


def _corpora(table, base: Path) -> Corpora:
    _check_keys("data", table, DATA_KEYS)
    directions = table.get("directions")
    if "manifest" in table:
        import json

        extra = set(table) - {"manifest", "directions"}
        if extra:
            raise ConfigError(f"data.manifest cannot be combined with data.{sorted(extra)[0]}")
        path = Path(_resolve(base, table["manifest"]))
        if not path.exists():
            raise ConfigError(f"data.manifest: file not found: {path}")
        return Corpora.from_manifest(json.loads(path.read_text(encoding="utf-8")), directions)
    missing = [k for k in ("vocab", "mono", "train", "valid", "test", "languages") if k not in table]
    if missing:
        raise ConfigError(f"data.{missing[0]} is required when data.manifest is not given")
    mono = {lang: [_resolve(base, p) for p in paths] for lang, paths in table["mono"].items()}
    return Corpora(_resolve(base, table["vocab"]), mono, _resolve(base, table["train"]),
                   _resolve(base, table["valid"]), _resolve(base, table["test"]), dict(table["languages"]), directions)


def resolve_seed(config_seed, flag_seed=None):
    """flag > ALMAFORGE_SEED > config."""
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    return int(config_seed)


def parse_config(raw: dict, base_dir=".", flag_seed=None, source=None) -> RecipeConfig:
    base = Path(base_dir)
    _check_keys("", raw, TOP_KEYS)
    if "data" not in raw:
        raise ConfigError("config needs a [data] section")
    seed = resolve_seed(raw.get("seed", 0), flag_seed)
    model_t = raw.get("model", {})
    _check_keys("model", model_t, MODEL_KEYS)
    model = _build("model", ModelConfig, model_t)
    corpora = _corpora(raw["data"], base)
    mixture = raw.get("mixture", {})
    _check_keys("mixture", mixture, MIXTURE_KEYS)
    mixture = {"temperature": float(mixture.get("temperature", 6.0)), "pinned": mixture.get("pinned")}
    stages = []
    for n in (1, 2):
        t = raw.get(f"stage{n}", {})
        _check_keys(f"stage{n}", t, STAGE_KEYS)
        stages.append(_build(f"stage{n}", TrainConfig, t, stage=n, seed=seed))
    ev = raw.get("eval", {})
    _check_keys("eval", ev, EVAL_KEYS)
    evaluation = _build("eval", EvalSettings, ev)
    sweep = raw.get("sweep", {})
    _check_keys("sweep", sweep, SWEEP_KEYS)
    out_dir = raw.get("out_dir")
    if out_dir is not None:
        out_dir = _resolve(base, out_dir)
    return RecipeConfig(seed, model, corpora, mixture, stages[0], stages[1], evaluation, sweep, out_dir, source)


def load_config(path, flag_seed=None) -> RecipeConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, path.parent, flag_seed, str(path))
