"""Experiment configuration: a JSON document validated before any work starts.

Schema (every section optional except ``task``, ``length`` and ``regime``;
unknown keys are rejected)::

    {
      "task":     {"family": "parity", "params": {"min_len": 1, "max_len": 3},
                   "split_fractions": [0.6, 0.2, 0.2]},
      "length":   {"mode": "variable", "l_max": 5},
      "policy":   {"backend": "neural", "k": 7, "emb": 8, "hidden": 64},
      "corpus":   {"n": 4000, "noise_rate": 0.3, "verbosity": {"0": 0.5, "1": 0.3, "2": 0.2},
                   "abstain_rate": 0.0},
      "pretrain": {<optim fields>},
      "regime":   {"name": "tilted", "alpha": 1.25, "beta": 0.1, "group_size": 8},
      "optim":    {<optim fields>},
      "data":     {"n_train": null, "n_val": null, "n_test": null},
      "eval":     {"exact": true, "k": 16, "decoders": [{"method": "beam", "beam_width": 4}]},
      "base_checkpoint": null,
      "run_dir": "runs/example",
      "global_seed": 0
    }

``beta`` accepts the string ``"inf"``. ``n_* = null`` uses every prompt of
the split once. Optim fields: learning_rate, warmup_steps, warmup_init_lr,
weight_decay, adam_beta1, adam_beta2, adam_eps, steps, batch_prompts,
eval_every (group_size comes from the regime, the seed from global_seed).
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .decode import DecodeConfig
from .errors import ConfigError
from .model import Arch, LengthMode
from .objective import RegimeConfig, build_regime
from .tasks import DEFAULT_SPLIT_FRACTIONS, TaskSpec
from .trainflow import OptimConfig

OPTIM_KEYS = {
    "learning_rate": float, "warmup_steps": int, "warmup_init_lr": float, "weight_decay": float,
    "adam_beta1": float, "adam_beta2": float, "adam_eps": float, "steps": int,
    "batch_prompts": int, "eval_every": int,
}
DECODE_KEYS = {
    "method": str, "temperature": float, "beam_width": int, "length_penalty": float,
    "alpha": float, "block_count": int, "mcmc_steps": int, "seed": int,
}
SECTIONS = {
    "task": {"family": str, "params": dict, "split_fractions": list},
    "length": {"mode": str, "l_max": int},
    "policy": {"backend": str, "k": int, "emb": int, "hidden": int},
    "corpus": {"n": int, "noise_rate": float, "verbosity": dict, "abstain_rate": float},
    "pretrain": OPTIM_KEYS,
    "regime": {"name": str, "alpha": float, "beta": object, "group_size": int},
    "optim": OPTIM_KEYS,
    "data": {"n_train": object, "n_val": object, "n_test": object},
    "eval": {"exact": bool, "k": int, "decoders": list},
}
TOP_LEVEL = set(SECTIONS) | {"base_checkpoint", "run_dir", "global_seed"}
REQUIRED = ("task", "length", "regime")

DEFAULTS = {
    "policy": {"backend": "neural", "emb": 8, "hidden": 64},
    "corpus": {"n": 4000, "noise_rate": 0.3, "verbosity": {"0": 1.0}, "abstain_rate": 0.0},
    "pretrain": {"learning_rate": 3e-3, "warmup_steps": 50, "weight_decay": 0.0, "steps": 3000,
                 "batch_prompts": 64, "eval_every": 3000},
    "optim": {},
    "data": {"n_train": None, "n_val": None, "n_test": None},
    "eval": {"exact": True, "k": 16, "decoders": []},
}


def _check_section(name: str, section, schema: dict) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"{name} must be an object", name)
    out = {}
    for key, value in section.items():
        if key not in schema:
            raise ConfigError(f"unknown key {name}.{key}", f"{name}.{key}")
        kind = schema[key]
        if kind is object or value is None:
            out[key] = value
            continue
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            out[key] = float(value)
        elif kind is int and isinstance(value, int) and not isinstance(value, bool):
            out[key] = value
        elif kind in (str, dict, list, bool) and isinstance(value, kind):
            out[key] = value
        else:
            raise ConfigError(f"{name}.{key} must be {kind.__name__}, got {value!r}", f"{name}.{key}")
    return out


def optim_from_dict(d: dict, group_size: int | None = None, seed: int | None = None) -> OptimConfig:
    """Build an OptimConfig; explicit ``group_size``/``seed`` override values stored in ``d``."""
    d = dict(d)
    if group_size is not None:
        d["group_size"] = group_size
    if seed is not None:
        d["global_seed"] = seed
    return OptimConfig(**d)


def regime_from_dict(d: dict, length: LengthMode) -> RegimeConfig:
    beta = d.get("beta")
    if isinstance(beta, str) and beta != "inf":
        raise ConfigError("beta must be a number or 'inf'", "regime.beta")
    return build_regime(d["name"], d.get("alpha", 1.0), beta, length, d.get("group_size", 8))


def decode_from_dict(d: dict, length: LengthMode, seed: int = 0) -> DecodeConfig:
    d = _check_section("eval.decoders[]", d, DECODE_KEYS)
    d.setdefault("seed", seed)
    return DecodeConfig(length=length, **d)


@dataclass
class ExperimentConfig:
    raw: dict
    spec: TaskSpec
    length: LengthMode
    arch: Arch
    backend: str
    regime: RegimeConfig
    pretrain: OptimConfig
    optim: OptimConfig
    decoders: list[DecodeConfig]
    global_seed: int

    @property
    def corpus(self) -> dict:
        return self.raw["corpus"]

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    @property
    def run_dir(self) -> Path:
        return Path(self.raw["run_dir"])

    @property
    def base_checkpoint(self) -> str | None:
        return self.raw.get("base_checkpoint")

    @property
    def split_fractions(self) -> tuple:
        return tuple(self.raw["task"].get("split_fractions", DEFAULT_SPLIT_FRACTIONS))

    def resolved(self) -> dict:
        return copy.deepcopy(self.raw)


def validate_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown key {key}", key)
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(f"missing section {key}", key)
    cfg = {}
    for name, schema in SECTIONS.items():
        merged = dict(DEFAULTS.get(name, {}))
        merged.update(_check_section(name, raw.get(name, {}), schema))
        cfg[name] = merged
    seed = raw.get("global_seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("global_seed must be an integer", "global_seed")
    cfg["global_seed"] = seed
    cfg["run_dir"] = raw.get("run_dir", "runs/default")
    cfg["base_checkpoint"] = raw.get("base_checkpoint")

    length = LengthMode(cfg["length"].get("mode", "variable"), cfg["length"].get("l_max", 0))
    cfg["length"] = {"mode": length.mode, "l_max": length.l_max}
    t = cfg["task"]
    if "family" not in t:
        raise ConfigError("task.family is required", "task.family")
    spec = TaskSpec(t["family"], t.get("params", {}), length.l_max)
    fr = t.get("split_fractions", list(DEFAULT_SPLIT_FRACTIONS))
    if len(fr) != 3 or any(not isinstance(x, (int, float)) or x < 0 for x in fr) or abs(sum(fr) - 1) > 1e-9:
        raise ConfigError("split_fractions must be three nonnegative numbers summing to 1", "task.split_fractions")

    if "name" not in cfg["regime"]:
        raise ConfigError("regime.name is required", "regime.name")
    regime = regime_from_dict(cfg["regime"], length)
    cfg["regime"] = regime.to_dict()

    p = cfg["policy"]
    default_k = max(len(x) for x in spec.all_prompts()) + length.l_max - 1
    p.setdefault("k", default_k)
    V = spec.vocab
    arch = Arch(k=p["k"], vocab_size=len(V), pad_id=V.pad_id, eos_id=V.eos_id,
                emb=p.get("emb", 0) if p["backend"] == "neural" else 0,
                hidden=p.get("hidden", 0) if p["backend"] == "neural" else 0)
    arch.validate(p["backend"])

    c = cfg["corpus"]
    if not 0 <= c["noise_rate"] <= 1:
        raise ConfigError("noise_rate must be in [0, 1]", "corpus.noise_rate")
    try:
        c["verbosity"] = {str(int(key)): float(v) for key, v in c["verbosity"].items()}
    except ValueError:
        raise ConfigError("verbosity keys must be integer filler lengths", "corpus.verbosity") from None

    pre_defaults = dict(DEFAULTS["pretrain"])
    pre_defaults.update(cfg["pretrain"])
    pretrain = optim_from_dict(pre_defaults, regime.group_size, seed)
    optim = optim_from_dict(cfg["optim"], regime.group_size, seed)

    e = cfg["eval"]
    if e["k"] < 1:
        raise ConfigError("eval.k must be >= 1", "eval.k")
    decoders = [decode_from_dict(d, LengthMode("variable", length.l_max), seed) for d in e["decoders"]]
    for name in ("n_train", "n_val", "n_test"):
        v = cfg["data"][name]
        if v is not None and (not isinstance(v, int) or v < 1):
            raise ConfigError(f"data.{name} must be null or a positive integer", f"data.{name}")
    return ExperimentConfig(cfg, spec, length, arch, p["backend"], regime, pretrain, optim, decoders, seed)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found", "config") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e}", "config") from None
    return validate_config(raw)


def beta_repr(beta: float):
    return "inf" if math.isinf(beta) else beta
