"""Run configuration: defaults, ``key=value`` files, environment and flag overrides."""
from __future__ import annotations

import os
from pathlib import Path

from .corpus import DURATIONS
from .graph import PropagationConfig
from .model import config_hash
from .training import TrainConfig

ENV_PREFIX = "SBG_"


class ConfigError(ValueError):
    pass


def parse_duration(value) -> int:
    """Seconds from an integer or one of day/week/month/quarter/year (optionally ``3day``)."""
    if isinstance(value, int):
        seconds = value
    else:
        text = str(value).strip().lower()
        if text in DURATIONS:
            seconds = DURATIONS[text]
        else:
            for unit, size in DURATIONS.items():
                if text.endswith(unit) and text[:-len(unit)].isdigit():
                    seconds = int(text[:-len(unit)]) * size
                    break
            else:
                try:
                    seconds = int(text)
                except ValueError:
                    raise ConfigError(f"cannot parse duration {value!r}") from None
    if seconds <= 0:
        raise ConfigError("R must be positive")
    return seconds


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _int_list(value) -> tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).split(",") if v.strip())


# key -> (default, parser)
SCHEMA = {
    "R": ("week", parse_duration),
    "min_count": (5, int),
    "kcore": (0, int),
    "d": (64, int),
    "d_a": (8, int),
    "lam": (0.5, float),
    "omega": (0.1, float),
    "beta": (0.1, float),
    "layers": (4, int),
    "jump": (True, _bool),
    "k_w": (5, int),
    "k_i": (2, int),
    "batch_size": (1024, int),
    "learning_rate": (0.001, float),
    "adam_beta1": (0.9, float),
    "adam_beta2": (0.999, float),
    "adam_epsilon": (1e-8, float),
    "epochs": (20, int),
    "patience": (5, int),
    "seed": (0, int),
    "pool_size": (1000, int),
    "f_mode": ("dot", str),
    "history_cap": (20, int),
    "train_sequences": (True, _bool),
    "max_bad_lines": (100, int),
    "spectral_cap": (2000, int),
    "diag_layers": ("0,1,2,4,8,16,32,64", _int_list),
    "input": ("", str),
    "input_format": ("tsv", str),
    "meta": ("", str),
    "dataset": ("", str),
    "url": ("", str),
    "out_dir": ("runs", str),
}

# keys that change the learned model; checkpoints record a hash of these
MODEL_KEYS = ("R", "min_count", "kcore", "d", "d_a", "lam", "omega", "beta", "layers", "jump",
              "f_mode", "history_cap", "train_sequences", "seed")


def _check_ranges(cfg: dict) -> None:
    rules = [
        (cfg["min_count"] >= 1, "min_count must be >= 1"),
        (cfg["d"] >= 1 and cfg["d_a"] >= 1, "d and d_a must be >= 1"),
        (0.0 <= cfg["lam"] <= 1.0, "lam must be in [0, 1]"),
        (cfg["batch_size"] >= 1, "batch_size must be >= 1"),
        (cfg["learning_rate"] > 0, "learning_rate must be > 0"),
        (cfg["k_w"] >= 0 and cfg["k_i"] >= 0, "k_w and k_i must be >= 0"),
        (cfg["epochs"] >= 1, "epochs must be >= 1"),
        (cfg["pool_size"] >= 2, "pool_size must be >= 2"),
        (cfg["history_cap"] >= 0, "history_cap must be >= 0"),
        (cfg["f_mode"] in ("dot", "cosine"), "f_mode must be dot or cosine"),
        (cfg["input_format"] in ("tsv", "jsonl", "amazon"), "input_format must be tsv, jsonl or amazon"),
    ]
    for ok, msg in rules:
        if not ok:
            raise ConfigError(msg)
    try:
        PropagationConfig(cfg["omega"], cfg["beta"], cfg["layers"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve(file_values=None, env=None, flags=None) -> dict:
    """Merge defaults < config file < environment < flags, then validate."""
    env = os.environ if env is None else env
    raw: dict = {}
    raw.update(file_values or {})
    raw.update({k[len(ENV_PREFIX):]: v for k, v in env.items()
                if k.startswith(ENV_PREFIX) and k[len(ENV_PREFIX):] in SCHEMA})
    raw.update({k: v for k, v in (flags or {}).items() if v is not None})
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    cfg = {}
    for key, (default, parse) in SCHEMA.items():
        try:
            cfg[key] = parse(raw[key]) if key in raw else parse(default)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw.get(key)!r} ({exc})") from None
    _check_ranges(cfg)
    return cfg


def dump(cfg: dict) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(map(str, v))
        return str(v).lower() if isinstance(v, bool) else str(v)

    return "".join(f"{k}={fmt(cfg[k])}\n" for k in SCHEMA)


def model_keys(cfg: dict) -> dict:
    return {k: cfg[k] for k in MODEL_KEYS}


def model_hash(cfg: dict) -> str:
    """Fingerprint of the settings that shape a checkpoint (matches the manifest's ``config_hash``)."""
    return config_hash(model_keys(cfg))


def propagation(cfg: dict) -> PropagationConfig:
    return PropagationConfig(cfg["omega"], cfg["beta"] if cfg["jump"] else 0.0, cfg["layers"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"],
        adam_beta1=cfg["adam_beta1"], adam_beta2=cfg["adam_beta2"], adam_epsilon=cfg["adam_epsilon"],
        k_w=cfg["k_w"], k_i=cfg["k_i"], epochs=cfg["epochs"], patience=cfg["patience"],
        propagation=propagation(cfg), seed=cfg["seed"], f_mode=cfg["f_mode"], d=cfg["d"],
        d_a=cfg["d_a"], lam=cfg["lam"], history_cap=cfg["history_cap"],
        train_sequences=cfg["train_sequences"], pool_size=cfg["pool_size"],
    )
