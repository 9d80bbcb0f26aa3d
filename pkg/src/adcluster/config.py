"""Flat ``key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored and there
are no sections. Missing keys keep their defaults, so an empty file is a valid
config. Every error names the offending key and line.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Any, Callable, NamedTuple

from .pipeline import RunConfig
from .trainer import Mode


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"key {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


class Key(NamedTuple):
    section: str | None  # RunConfig attribute holding the field, None for top level
    field: str
    parse: Callable[[str], Any]
    check: Callable[[Any], bool]
    rule: str


def _int(text: str) -> int:
    value = float(text) if any(c in text for c in ".eE") else int(text)
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"expected an integer, got {text!r}")
        value = int(value)
    return value


def _float(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"expected a finite number, got {text!r}")
    return value


def _ratio(text: str) -> float:
    # "3:1" and "3" both mean three originals per augmented sample
    if ":" in text:
        a, b = text.split(":", 1)
        return _float(a) / _float(b)
    return _float(text)


def _path(text: str) -> str:
    if not text:
        raise ValueError("empty path")
    return text


_ANY = lambda v: True
_POS = lambda v: v > 0
_NONNEG = lambda v: v >= 0
_ATLEAST1 = lambda v: v >= 1
_ATLEAST2 = lambda v: v >= 2
_UNIT_OPEN = lambda v: 0 < v < 1
_MOMENTUM = lambda v: 0 <= v < 1

KEYS: dict[str, Key] = {
    # synthetic data
    "n_identities_source": Key("synth", "n_identities_source", _int, _ATLEAST1, ">= 1"),
    "n_identities_target": Key("synth", "n_identities_target", _int, _ATLEAST1, ">= 1"),
    "samples_per_identity_per_camera": Key("synth", "samples_per_identity_per_camera", _int, _ATLEAST1, ">= 1"),
    "n_cameras_source": Key("synth", "n_cameras_source", _int, _ATLEAST2, ">= 2"),
    "n_cameras_target": Key("synth", "n_cameras_target", _int, _ATLEAST2, ">= 2"),
    "raw_dim": Key("synth", "raw_dim", _int, _ATLEAST1, ">= 1"),
    "prototype_scale": Key("synth", "prototype_scale", _float, _POS, "> 0"),
    "within_identity_noise": Key("synth", "within_identity_noise", _float, _NONNEG, ">= 0"),
    "camera_style_strength": Key("synth", "camera_style_strength", _float, _NONNEG, ">= 0"),
    "domain_shift_strength": Key("synth", "domain_shift_strength", _float, _NONNEG, ">= 0"),
    # encoder and source pretraining
    "margin": Key("train", "margin", _float, _POS, "> 0"),
    "n_s": Key("train", "n_s", _int, _ATLEAST2, ">= 2"),
    "n_t": Key("train", "n_t", _int, _ATLEAST2, ">= 2"),
    "source_epochs": Key("train", "epochs", _int, _NONNEG, ">= 0"),
    "lr": Key("train", "lr", _float, _POS, "> 0"),
    "momentum": Key("train", "momentum", _float, _MOMENTUM, "in [0, 1)"),
    "hidden_dim": Key("train", "hidden_dim", _int, _ATLEAST1, ">= 1"),
    "feat_dim": Key("train", "feat_dim", _int, _ATLEAST1, ">= 1"),
    # clustering
    "k1": Key("cluster", "k1", _int, _ATLEAST1, ">= 1"),
    "k2": Key("cluster", "k2", _int, _ATLEAST1, ">= 1"),
    "lambda_rr": Key("cluster", "lambda_rr", _float, lambda v: 0 <= v <= 1, "in [0, 1]"),
    "eps_quantile": Key("cluster", "eps_quantile", _float, _UNIT_OPEN, "in (0, 1)"),
    "min_pts": Key("cluster", "min_pts", _int, _ATLEAST2, ">= 2"),
    # style generator
    "lambda": Key("gen", "lam", _float, _POS, "> 0"),
    "beta_recon": Key("gen", "beta_recon", _float, _NONNEG, ">= 0"),
    "gamma_style": Key("gen", "gamma_style", _float, _NONNEG, ">= 0"),
    "gen_lr": Key("gen", "gen_lr", _float, _POS, "> 0"),
    "gen_momentum": Key("gen", "gen_momentum", _float, _MOMENTUM, "in [0, 1)"),
    "prefit_steps": Key("gen", "prefit_steps", _int, _NONNEG, ">= 0"),
    # adaptation loop
    "n_cluster_iterations": Key("adapt", "n_cluster_iterations", _int, _NONNEG, ">= 0"),
    "epochs_per_iteration": Key("adapt", "epochs_per_iteration", _int, _NONNEG, ">= 0"),
    "P": Key("adapt", "P", _int, _ATLEAST2, ">= 2"),
    "K_img": Key("adapt", "K_img", _int, _ATLEAST2, ">= 2"),
    "aug_ratio": Key("adapt", "aug_ratio", _ratio, _POS, "> 0"),
    "mode": Key("adapt", "mode", Mode.parse, _ANY, "one of baseline, asa, full"),
    # run level
    "queries_per_identity": Key(None, "queries_per_identity", _int, _ATLEAST1, ">= 1"),
    "output_dir": Key(None, "output_dir", _path, _ANY, "non-empty"),
    "seed": Key(None, "seed", _int, _NONNEG, ">= 0"),
}


def parse_config(text: str) -> RunConfig:
    values: dict[str, tuple[Any, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        name, raw = (part.strip() for part in line.split("=", 1))
        if not name:
            raise ConfigError("missing key before '='", line=lineno)
        if name not in KEYS:
            raise ConfigError("unknown key", name, lineno)
        if name in values:
            raise ConfigError(f"duplicate key (first set on line {values[name][1]})", name, lineno)
        if not raw:
            raise ConfigError("missing value", name, lineno)
        entry = KEYS[name]
        try:
            value = entry.parse(raw)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"cannot parse {raw!r}: {exc}", name, lineno) from None
        if not entry.check(value):
            raise ConfigError(f"value {raw!r} out of range, must be {entry.rule}", name, lineno)
        values[name] = (value, lineno)

    cfg = RunConfig()
    sections: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    for name, (value, _) in values.items():
        entry = KEYS[name]
        (sections.setdefault(entry.section, {}) if entry.section else top)[entry.field] = value
    cfg = replace(cfg, **top, **{s: replace(getattr(cfg, s), **kw) for s, kw in sections.items()})

    # cross-field constraints, e.g. k2 <= k1
    if cfg.cluster.k2 > cfg.cluster.k1:
        line = values.get("k2", values.get("k1", (None, None)))[1]
        raise ConfigError(f"k2 ({cfg.cluster.k2}) must not exceed k1 ({cfg.cluster.k1})", "k2", line)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config`; every key written explicitly."""
    lines = []
    for name, entry in KEYS.items():
        value = getattr(getattr(cfg, entry.section), entry.field) if entry.section else getattr(cfg, entry.field)
        if isinstance(value, Mode):
            value = value.value
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"
