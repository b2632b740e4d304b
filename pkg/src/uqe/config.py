"""Strict JSON run configuration with defaults filled in.

A run config has up to four sections::

    {"synth": {...}, "net": {...}, "ensemble": {...}, "crossval": {"k": 10, "seed": 0}}

Unknown keys anywhere raise :class:`ConfigError`. ``net.input_dim`` may be
omitted and is then taken from the data.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Mapping

from .ensemble import EnsembleConfig
from .net import NetConfig
from .synthgen import SynthConfig


class ConfigError(ValueError):
    pass


SECTIONS = ("synth", "net", "ensemble", "crossval")
CROSSVAL_DEFAULTS = {"k": 10, "seed": 0}
_ENSEMBLE_FIELDS = tuple(f.name for f in dataclasses.fields(EnsembleConfig) if f.name != "net")


def _check_keys(section: str, given: Mapping, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def _field_defaults(cls) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _typed(section: str, key: str, value, default):
    """Light type check against the default's type."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number")
        value = float(value)
    elif isinstance(default, tuple):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key} must be a list")
        value = tuple(value)
    return value


@dataclasses.dataclass
class RunConfig:
    synth: dict
    net: dict
    ensemble: dict
    crossval: dict

    @classmethod
    def from_dict(cls, raw: Mapping | None) -> "RunConfig":
        raw = dict(raw or {})
        _check_keys("<root>", raw, SECTIONS)
        for name in SECTIONS:
            if name in raw and not isinstance(raw[name], Mapping):
                raise ConfigError(f"section {name!r} must be an object")
        sections = {}
        for name, template in (("synth", SynthConfig), ("net", NetConfig)):
            defaults = _field_defaults(template)
            if name == "net":
                defaults["input_dim"] = None
            given = raw.get(name, {})
            _check_keys(name, given, defaults)
            sections[name] = {k: _typed(name, k, given.get(k, v), v) if k in given else v
                              for k, v in defaults.items()}
        ens_defaults = {k: v for k, v in _field_defaults(EnsembleConfig).items() if k in _ENSEMBLE_FIELDS}
        given = raw.get("ensemble", {})
        _check_keys("ensemble", given, ens_defaults)
        sections["ensemble"] = {k: _typed("ensemble", k, given[k], v) if k in given else v
                                for k, v in ens_defaults.items()}
        given = raw.get("crossval", {})
        _check_keys("crossval", given, CROSSVAL_DEFAULTS)
        sections["crossval"] = {k: _typed("crossval", k, given.get(k, v), v) for k, v in CROSSVAL_DEFAULTS.items()}
        return cls(**sections)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, Mapping):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(raw)

    def synth_config(self, **overrides) -> SynthConfig:
        values = {**self.synth, **{k: v for k, v in overrides.items() if v is not None}}
        try:
            return SynthConfig(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synth: {exc}") from None

    def ensemble_config(self, input_dim: int, seed: int | None = None) -> EnsembleConfig:
        net = dict(self.net)
        if net["input_dim"] is None:
            net["input_dim"] = input_dim
        elif net["input_dim"] != input_dim:
            raise ConfigError(f"net.input_dim={net['input_dim']} but data has {input_dim} features")
        if seed is not None:
            net["seed"] = seed
        try:
            return EnsembleConfig(NetConfig(**net), **self.ensemble)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"ensemble: {exc}") from None

    def resolved(self, input_dim: int | None = None, seed: int | None = None) -> dict:
        """Fully resolved config; ensemble seeds are expanded when data is known."""
        out = {"synth": SynthConfig(**self.synth).to_dict() if self.synth else {},
               "net": dict(self.net), "ensemble": dict(self.ensemble),
               "crossval": dict(self.crossval)}
        if input_dim is not None:
            ens = self.ensemble_config(input_dim, seed)
            out["net"] = ens.net.to_dict()
            out["ensemble"] = {k: v for k, v in ens.to_dict().items() if k != "net"}
        for sec in ("net", "ensemble"):
            out[sec] = {k: list(v) if isinstance(v, tuple) else v for k, v in out[sec].items()}
        return out
