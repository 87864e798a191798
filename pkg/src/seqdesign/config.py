"""Flat TOML run configurations and the built-in presets.

Every key of :class:`~seqdesign.harness.SimConfig` may appear at top level,
plus ``true_models`` (a list of 0-based indices, replicated one after the
other) and ``workers``.  Unknown keys and wrongly typed values are rejected
with a message naming the key.
"""

from __future__ import annotations

import sys
from dataclasses import fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .harness import SimConfig


class ConfigError(ValueError):
    pass


_INT, _FLOAT, _STR = (int,), (int, float), (str,)
SCHEMA: dict[str, tuple] = {
    "suite": _STR,
    "true_index": _INT,
    "criterion": _STR,
    "T": _INT,
    "n_t": (int, list),
    "rho_mode": (str, int, float),
    "eval_mode": _STR,
    "gof_level": _FLOAT,
    "pretest_n": _INT,
    "replications": _INT,
    "seed": _INT,
    "budget": _INT,
    "uniform_points": _INT,
    "comparisons": (list,),
    "true_models": (list,),
    "workers": _INT,
}
assert set(SCHEMA) >= {f.name for f in fields(SimConfig)}

PRESETS: dict[str, dict] = {
    "fig1-snr375": {
        "suite": "dose-response:delta=5", "T": 10, "n_t": 15, "replications": 500,
        "true_models": [0, 1, 2], "comparisons": ["hybrid", "robust", "standard", "uniform"],
    },
    "fig1-snr135": {
        "suite": "dose-response:delta=3", "T": 10, "n_t": 15, "replications": 500,
        "true_models": [0, 1, 2], "comparisons": ["hybrid", "robust", "standard", "uniform"],
    },
    "robust-512": {
        "suite": "robust-parameter", "T": 32, "n_t": [16, 16, 16, 16, 32, 32, 32],
        "budget": 512, "rho_mode": "zero", "replications": 100, "true_models": [0, 1, 4],
        "comparisons": ["hybrid", "robust", "uniform"],
    },
    "multivar-gof": {
        "suite": "multivariate-linear", "T": 15, "n_t": 36, "eval_mode": "gof-filtered",
        "gof_level": 0.05, "replications": 100, "true_models": [0, 4, 5],
        "comparisons": ["hybrid", "robust", "uniform"],
    },
}
ALIASES = {
    "dose-response-fig1-snr375": "fig1-snr375",
    "dose-response-fig1-snr135": "fig1-snr135",
}


def _check(raw: dict) -> dict:
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        allowed = SCHEMA[key]
        if isinstance(value, bool) or not isinstance(value, allowed):
            names = "/".join(t.__name__ for t in allowed)
            raise ConfigError(f"config key {key!r} must be {names}, got {type(value).__name__}")
        if isinstance(value, list):
            item = str if key == "comparisons" else int
            if not all(isinstance(v, item) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"config key {key!r} must be a list of {item.__name__}")
    return raw


def preset(name: str) -> dict:
    name = ALIASES.get(name, name)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dict(PRESETS[name])


def load_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(f"config must be flat; {key!r} is a table")
    return _check(raw)


def merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return _check(out)


def build(raw: dict) -> tuple[SimConfig, list[int], int]:
    """``(config, true model indices, workers)`` from a checked raw mapping."""
    raw = _check(dict(raw))
    workers = raw.pop("workers", 1)
    trues = raw.pop("true_models", None)
    if trues is None:
        trues = [raw.get("true_index", 0)]
    try:
        cfgs = [SimConfig(**{**raw, "true_index": int(t)}).validate() for t in trues]
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return cfgs[0], [int(t) for t in trues], int(workers)


def dumps(raw: dict) -> str:
    """Serialise a flat mapping to TOML."""
    lines = []
    for key in sorted(raw):
        if raw[key] is None:
            continue
        lines.append(f"{key} = {_toml_value(raw[key])}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)
