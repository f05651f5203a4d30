"""Flat ``key = value`` config files covering NetworkConfig and TrainConfig.

Lists are comma-separated; ``lr_schedule`` is ``epoch:rate`` pairs
(``0:0.001, 200:0.0001``); ``none`` clears an optional value; ``#`` starts a comment.
"""
from __future__ import annotations

from dataclasses import asdict, fields
from pathlib import Path

from .psm_blocks import ConfigError, NetworkConfig
from .training import TrainConfig


def _ints(s):
    return tuple(int(x) for x in s.replace(" ", "").split(",") if x)


def _floats(s):
    return tuple(float(x) for x in s.replace(" ", "").split(",") if x)


def _opt(conv):
    return lambda s: None if s.lower() == "none" else conv(s)


def _schedule(s):
    pairs = []
    for item in s.split(","):
        if not item.strip():
            continue
        epoch, rate = item.split(":")
        pairs.append((int(epoch), float(rate)))
    return tuple(pairs)


_PARSERS = {
    "stem_channels": int,
    "stage_blocks": _ints,
    "stage_channels": _ints,
    "dilations": _ints,
    "spp_scales": _ints,
    "spp_reduced_channels": int,
    "fusion_channels": int,
    "skip_stages": _ints,
    "max_disparity": int,
    "regularizer": str,
    "reg_channels": int,
    "loss_weights": _floats,
    "dtype": str,
    "lr_schedule": _schedule,
    "crop_h": _opt(int),
    "crop_w": _opt(int),
    "batch_size": int,
    "epochs": int,
    "seed": int,
    "val_count": int,
    "eval_every": int,
    "checkpoint_every": int,
    "max_steps": _opt(int),
    "target_epe": _opt(float),
}
_NET_KEYS = {f.name for f in fields(NetworkConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def configs_from_kv(kv: dict, extra_keys: frozenset = frozenset()) -> tuple:
    net_kw, train_kw = {}, {}
    for key, value in kv.items():
        if key in extra_keys:
            continue
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            parsed = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None
        (net_kw if key in _NET_KEYS else train_kw)[key] = parsed
    return NetworkConfig(**net_kw).validate(), TrainConfig(**train_kw).validate()


def load_config(path, extra_keys: frozenset = frozenset()) -> tuple:
    """Read ``(NetworkConfig, TrainConfig)``; unspecified keys keep their defaults."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return configs_from_kv(parse_kv(p.read_text()), extra_keys)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{a}:{b!r}" for a, b in value)
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(net: NetworkConfig, train: TrainConfig) -> str:
    lines = ["# network"]
    lines += [f"{k} = {_fmt(v)}" for k, v in asdict(net).items()]
    lines.append("# training")
    lines += [f"{k} = {_fmt(v)}" for k, v in asdict(train).items()]
    return "\n".join(lines) + "\n"
