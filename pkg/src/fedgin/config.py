"""Flat experiment configuration.

Grammar, one entry per line::

    # comment
    section.key = value

Blank lines and ``#`` comments are ignored; a trailing ``# ...`` after a
value is stripped.  Values are parsed according to the type of the default
(int, float, str, bool, or comma-separated tuple).  Unknown keys and
malformed lines raise :class:`ConfigError` naming the line.
"""
from __future__ import annotations

import copy
import os
from dataclasses import replace

from .augment import FourierMixConfig, GinConfig
from .fedcore import FederationConfig
from .model import LossConfig, UNetConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "federation": {
        "rounds": 100,
        "local_epochs": 1,
        "lr": 5e-4,
        "weight_decay": 1e-4,
        "batch_size": 8,
        "eval_every": 1,
        "failure_policy": "abort",
        "threads": 0,  # 0: one thread per client
        "scheduler_factor": 0.5,
        "scheduler_patience": 5,
        "scheduler_min_delta": 1e-4,
        "transport": "inprocess",
    },
    "model": {"depth": 3, "base_channels": 8, "norm_mode": "batch", "bn_momentum": 0.1},
    "loss": {"gamma": 2.0, "dice_eps": 1e-5, "w_focal": 1.0, "w_dice": 1.0},
    "gin": {"n_layers": 4, "kernel_choices": (1, 3), "hidden_channels": 2, "slope_range": (0.01, 0.3),
            "alpha_range": (0.0, 1.0)},
    "fourier": {"window_ratio": 0.25, "mix_strength": 1.0},
    "data": {"volumes_per_client": 20, "modalities": ("A", "B"), "grid": (16, 32, 32), "test_volumes": 10,
             "val_volumes": 2, "seed": 1000, "scarce_volumes": 2, "sweep_volumes": (2, 4, 10), "paired": False},
    "experiment": {"seed": 0, "seeds": (0, 1, 2), "strategy": "federated", "augmentation": "none"},
}

ALIASES = {
    "federation.T": "federation.rounds",
    "federation.E": "federation.local_epochs",
    "federation.eta": "federation.lr",
    "federation.B": "federation.batch_size",
}

# desk-scale CI preset; learning rate raised so 20 rounds converge
QUICK = {
    "federation.rounds": 20,
    "federation.lr": 2e-3,
    "data.volumes_per_client": 8,
    "data.sweep_volumes": (8,),
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_scalar(text: str, like):
    if isinstance(like, bool):
        return _parse_bool(text)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def parse_value(text: str, like):
    text = text.strip()
    if isinstance(like, tuple):
        parts = [p.strip() for p in text.strip("()[]").split(",") if p.strip()]
        if not parts:
            raise ValueError("empty list")
        proto = like[0] if like else ""
        return tuple(_parse_scalar(p, proto) for p in parts)
    if not text:
        raise ValueError("empty value")
    return _parse_scalar(text, like)


def set_value(config: dict, dotted: str, text: str, where: str = "") -> None:
    dotted = ALIASES.get(dotted.strip(), dotted.strip())
    prefix = f"{where}: " if where else ""
    if dotted.count(".") != 1:
        raise ConfigError(f"{prefix}key must look like section.key, got {dotted!r}")
    section, key = dotted.split(".")
    if section not in config or key not in config[section]:
        raise ConfigError(f"{prefix}unknown key {dotted!r}")
    try:
        config[section][key] = parse_value(text, config[section][key])
    except ValueError as exc:
        raise ConfigError(f"{prefix}bad value for {dotted}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>", base: dict | None = None) -> dict:
    config = copy.deepcopy(base) if base is not None else default_config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        set_value(config, key, value, f"{source}:{lineno}")
    return config


def load_config(path=None, overrides=(), quick: bool = False) -> dict:
    """Defaults, then the quick preset, then the file, then ``--set`` overrides, then FEDGIN_SEED."""
    config = default_config()
    if quick:
        for k, v in QUICK.items():
            s, key = k.split(".")
            config[s][key] = v
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            config = parse_config_text(fh.read(), str(path), config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_value(config, key, value, "--set")
    env = os.environ.get("FEDGIN_SEED")
    if env is not None:
        try:
            config["experiment"]["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"FEDGIN_SEED must be an integer, got {env!r}") from None
    return config


def dump_config(config: dict) -> str:
    lines = []
    for section in config:
        for key, value in config[section].items():
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{section}.{key} = {value}")
    return "\n".join(lines) + "\n"


def federation_config(config: dict, **changes) -> FederationConfig:
    f, m, lo, g, fo = (config[s] for s in ("federation", "model", "loss", "gin", "fourier"))
    fed = FederationConfig(
        rounds=f["rounds"], local_epochs=f["local_epochs"], lr=f["lr"], weight_decay=f["weight_decay"],
        batch_size=f["batch_size"], seed=config["experiment"]["seed"], eval_every=f["eval_every"],
        failure_policy=f["failure_policy"], threads=f["threads"] or 1,
        scheduler_factor=f["scheduler_factor"], scheduler_patience=f["scheduler_patience"],
        scheduler_min_delta=f["scheduler_min_delta"],
        unet=UNetConfig(depth=m["depth"], base_channels=m["base_channels"], norm_mode=m["norm_mode"],
                        num_domains=len(config["data"]["modalities"]), bn_momentum=m["bn_momentum"]),
        loss=LossConfig(gamma=lo["gamma"], dice_eps=lo["dice_eps"], w_focal=lo["w_focal"], w_dice=lo["w_dice"]),
        gin=GinConfig(**g),
        fourier=FourierMixConfig(**fo),
    )
    return replace(fed, **changes) if changes else fed
