"""Flat ``key = value`` config files mapped onto the config dataclasses."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field

from .bench import SynthSpec
from .model import ModelConfig
from .training import TrainConfig

__all__ = ["ConfigError", "EVTConfig", "RunConfig", "parse_flat", "coerce_fields", "load_run_config", "load_synth_spec",
           "dump_flat"]

# keys filled from the data, never from a config file
_DATA_FIELDS = {"attr_dim", "directed", "attributed"}


class ConfigError(ValueError):
    pass


@dataclass
class EVTConfig:
    risk_q: float = 1e-3
    initial_quantile: float = 0.02


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evt: EVTConfig = field(default_factory=EVTConfig)


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(value: str, tp, key: str):
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        if value.lower() in ("none", "null", "") and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
    if tp is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected {tp.__name__}, got {value!r}") from None
    return value


def coerce_fields(cls, raw: dict[str, str], exclude=()) -> dict:
    """Convert the entries of ``raw`` naming fields of ``cls`` to their annotated types."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)} - set(exclude)
    return {k: _convert(v, hints[k], k) for k, v in raw.items() if k in names}


def _build(cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {cls.__name__}: {err}") from None


def run_config_from_dict(raw: dict[str, str], source: str = "<config>") -> RunConfig:
    groups = (ModelConfig, TrainConfig, EVTConfig)
    known = set()
    for cls in groups:
        known |= {f.name for f in dataclasses.fields(cls)}
    known -= _DATA_FIELDS
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown key(s): {', '.join(unknown)}")
    model_kw = coerce_fields(ModelConfig, raw, exclude=_DATA_FIELDS)
    train_kw = coerce_fields(TrainConfig, raw)
    # dropout and seed live in both; one key drives both
    for shared in ("dropout", "seed"):
        if shared in train_kw:
            model_kw[shared] = train_kw[shared]
    if "mc_samples" in train_kw:
        model_kw.setdefault("mc_train", train_kw["mc_samples"])
    return RunConfig(_build(ModelConfig, model_kw), _build(TrainConfig, train_kw),
                     _build(EVTConfig, coerce_fields(EVTConfig, raw)))


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return run_config_from_dict(parse_flat(fh.read(), path), path)


def load_synth_spec(path: str) -> SynthSpec:
    with open(path) as fh:
        raw = parse_flat(fh.read(), path)
    unknown = sorted(set(raw) - {f.name for f in dataclasses.fields(SynthSpec)})
    if unknown:
        raise ConfigError(f"{path}: unknown key(s): {', '.join(unknown)}")
    return _build(SynthSpec, coerce_fields(SynthSpec, raw))


def dump_flat(*objs) -> str:
    lines = []
    for obj in objs:
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"
