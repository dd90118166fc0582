"""Run configuration: JSON documents, dotted-key overrides and validation."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .restorer import get_variant


class ConfigError(ValueError):
    pass


SIGMAS_DEFAULT = [0, 10, 20, 30, 40, 50, 60, 70, 80]

DEFAULTS: dict = {
    "task": "denoise",
    "seed": 0,
    "data": {
        "root": None,
        "patch": 64,
        "augment": True,
        "syn_holdout": 0.125,
        "real_holdout": 0.25,
    },
    "degrade": {
        "source": None,
        "real_source": None,
        "pool_source": None,
        "builtin": {"size": 64, "syn": 64, "real": 64, "pool": 64},
        "syn": {},
        "real": {},
        "log_degradations": False,
    },
    "model": {"variant": "T", "channels": 3, "eps_base": 16},
    "train": {
        "epochs": 60,
        "batch_size": 8,
        "lr": 5e-5,
        "lr_eps": None,
        "iters_per_epoch": None,
        "ema_decay": 0.9999,
        "save_diffusion": False,
        "divergence_patience": 10,
        "detach_conditions": False,
    },
    "adapt": {
        "enabled": True,
        "mode": "paired",
        "t_range": [1, 1000],
        "channel_shuffle": True,
        "residual_swap": True,
        "delta": 0.05,
        "norm": "l2",
        "schedule": {"T": 1000, "beta_lo": 1e-6, "beta_hi": 1e-2},
    },
    "lambda": {"gamma": 5.0, "beta": 0.2, "horizon": None},
    "stage": {"gap_db": 3.0, "k": 3, "grad_ratio": 0.1},
    "eval": {"split": "real", "checkpoint": None},
    "probe": {
        "size": 32,
        "n_train": 800,
        "n_test": 200,
        "steps": 3000,
        "batch_size": 32,
        "lr": 1e-3,
        "eps_base": 16,
        "sigmas": SIGMAS_DEFAULT,
        "draws": 10,
        "plot": True,
        "source": "builtin",
    },
}

# Per-task degradation presets, applied underneath any user-supplied keys.
TASK_PRESETS = {
    "denoise": {
        "syn": {"kind": "awgn", "sigma_range": [0, 75]},
        "real": {"kind": "poisson_gaussian", "peak_range": [20, 60], "read_sigma_range": [2, 10]},
    },
    "derain": {
        "syn": {"kind": "rain", "streak_angle_range": [-15, 15], "opacity_range": [0.15, 0.45]},
        "real": {"kind": "rain", "streak_angle_range": [-35, 35], "opacity_range": [0.1, 0.6],
                 "streak_len_range": [10, 32]},
    },
    "deblur": {
        "syn": {"kind": "motion_blur", "kernel_len_range": [3, 11], "angle_range": [0, 180]},
        "real": {"kind": "motion_blur", "kernel_len_range": [7, 15], "angle_range": [0, 180]},
    },
}
TASKS = tuple(TASK_PRESETS)
# Keys whose value is a free-form mapping rather than a fixed schema.
OPEN_KEYS = {"degrade.syn", "degrade.real"}


def _merge(base: dict, upd: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        key = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key!r} must be a mapping")
            out[k] = {**out[k], **copy.deepcopy(v)} if key in OPEN_KEYS else _merge(out[k], v, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items: list[str] | None) -> dict:
    """``["a.b=1", ...]`` -> nested dict. Duplicate keys are an error."""
    seen: set[str] = set()
    nested: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key in seen:
            raise ConfigError(f"duplicate override for {key!r}")
        seen.add(key)
        parts = key.split(".")
        node = nested
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} conflicts with another override")
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"override {key!r} conflicts with another override")
        node[parts[-1]] = parse_value(raw)
    return nested


def resolve(file_cfg: dict | None = None, overrides: list[str] | None = None, seed: int | None = None) -> dict:
    """Defaults <- file config <- overrides <- explicit seed; then task presets fill gaps."""
    cfg = _merge(DEFAULTS, file_cfg or {})
    cfg = _merge(cfg, parse_overrides(overrides))
    if seed is not None:
        cfg["seed"] = int(seed)
    task = cfg["task"]
    if task not in TASK_PRESETS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    for side in ("syn", "real"):
        cfg["degrade"][side] = {**TASK_PRESETS[task][side], **cfg["degrade"][side]}
    validate(cfg)
    return cfg


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from None


def list_recipes() -> list[str]:
    from importlib.resources import files

    return sorted(p.name[:-5] for p in files("nadapt.recipes").iterdir() if p.name.endswith(".json"))


def load_recipe(name: str) -> dict:
    """A bundled partial config, e.g. ``ablation_f`` or ``toy``."""
    from importlib.resources import files

    if name not in list_recipes():
        raise ConfigError(f"unknown recipe {name!r}; available: {', '.join(list_recipes())}")
    return json.loads(files("nadapt.recipes").joinpath(name + ".json").read_text())


def layer(*cfgs: dict) -> dict:
    """Deep-merge partial configs left to right (later wins)."""
    out: dict = {}
    for c in cfgs:
        out = _deep(out, c)
    return out


def _deep(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _deep(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def validate(cfg: dict) -> None:
    from .degrade import DegradeSpec

    lo, hi = cfg["adapt"]["t_range"]
    T = cfg["adapt"]["schedule"]["T"]
    if not (1 <= lo <= hi <= T):
        raise ConfigError(f"adapt.t_range must lie within [1, {T}], got {[lo, hi]}")
    if cfg["adapt"]["mode"] not in ("paired", "unpaired"):
        raise ConfigError("adapt.mode must be 'paired' or 'unpaired'")
    if cfg["adapt"]["norm"] not in ("l2", "mse"):
        raise ConfigError("adapt.norm must be 'l2' or 'mse'")
    if cfg["adapt"]["delta"] < 0:
        raise ConfigError("adapt.delta must be >= 0")
    if cfg["train"]["epochs"] < 1 or cfg["train"]["batch_size"] < 1:
        raise ConfigError("train.epochs and train.batch_size must be >= 1")
    if cfg["data"]["patch"] % 16:
        raise ConfigError("data.patch must be divisible by 16")
    if cfg["model"]["channels"] not in (1, 3):
        raise ConfigError("model.channels must be 1 or 3")
    try:
        get_variant(cfg["model"]["variant"])
        for side in ("syn", "real"):
            DegradeSpec.from_dict(cfg["degrade"][side])
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    sig = cfg["probe"]["sigmas"]
    if any(b <= a for a, b in zip(sig, sig[1:])) or min(sig) < 0 or max(sig) > 80:
        raise ConfigError("probe.sigmas must be strictly increasing within [0, 80]")


@dataclass
class RunConfig:
    """Typed view of a resolved config dict for the trainer."""

    task: str
    variant: str
    epochs: int
    batch_size: int
    lr: float
    t_range: tuple[int, int]
    mode: str
    channel_shuffle: bool
    residual_swap: bool
    seed: int
    patch: int
    adapt_enabled: bool = True
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, cfg: dict) -> "RunConfig":
        a = cfg["adapt"]
        return cls(
            task=cfg["task"],
            variant=str(cfg["model"]["variant"]).upper(),
            epochs=int(cfg["train"]["epochs"]),
            batch_size=int(cfg["train"]["batch_size"]),
            lr=float(cfg["train"]["lr"]),
            t_range=(int(a["t_range"][0]), int(a["t_range"][1])),
            mode=a["mode"],
            channel_shuffle=bool(a["channel_shuffle"]),
            residual_swap=bool(a["residual_swap"]),
            seed=int(cfg["seed"]),
            patch=int(cfg["data"]["patch"]),
            adapt_enabled=bool(a["enabled"]),
            raw=cfg,
        )

    @property
    def lambda_horizon(self) -> int:
        h = self.raw["lambda"]["horizon"]
        return int(h) if h is not None else max(self.epochs - 1, 1)
