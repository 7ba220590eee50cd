"""Strict YAML run configuration.

Unknown keys are errors, every error names its field path (for example
``stages[1].H``), and all defaults are materialized so the effective
configuration can be printed and re-loaded unchanged.

Seeds not given explicitly are derived from the top-level ``seed``::

    model.init_seed             = derive_seed(seed, "init")
    stages[i].corpus.transition_seed = derive_seed(seed, "corpus")
    stages[i].seed              = derive_seed(seed, "stage", i)
"""

from __future__ import annotations

import dataclasses
import os
import re
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from .data import CorpusSpec, DataError
from .engine import ConfigError, StageConfig
from .models import ModelError, ModelSpec
from .numkit import derive_seed
from .optim import AdamWConfig, MuonConfig, OptimError, OuterConfig, SGDConfig

__all__ = ["RunConfig", "load_config", "parse_config", "config_to_dict", "dump_config"]

REPORT_FORMATS = ("csv", "json")
_INNER = {"adamw": AdamWConfig, "muon": MuonConfig, "sgd": SGDConfig}
_NAME = re.compile(r"[A-Za-z0-9_-]+")
_FLAGS = ("reset_inner_state_on_sync", "carry_state_across_stages", "allow_partial_round")


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    stages: tuple
    seed: int = 0
    output_dir: str = "runs/default"
    report_formats: tuple = REPORT_FORMATS


def _mapping(data: Any, path: str) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", path)
    return data


def _join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        tp = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(tp), typing.get_args(tp)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path)
        return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"unsupported field type {tp!r}", path)


def _build(cls, data: dict, path: str, skip=(), **extra):
    """Instantiate dataclass ``cls`` from scalar fields in ``data``."""
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls) if f.init and f.name not in skip}
    kwargs = dict(extra)
    for key, value in data.items():
        if key not in fields:
            raise ConfigError("unknown field", _join(path, key))
        kwargs[key] = _coerce(value, hints[key], _join(path, key))
    try:
        return cls(**kwargs)
    except ConfigError as e:
        raise ConfigError(e.message, _join(path, e.field)) from None
    except (ModelError, DataError, OptimError) as e:
        raise ConfigError(str(e), path) from None


def _inner(data: Any, path: str):
    data = dict(_mapping(data, path))
    kind = data.pop("kind", "adamw")
    if kind not in _INNER:
        raise ConfigError(f"must be one of {sorted(_INNER)}, got {kind!r}", _join(path, "kind"))
    if kind == "muon":
        sub = dict(_mapping(data.pop("adamw", None), _join(path, "adamw")))
        if sub.pop("kind", "adamw") != "adamw":
            raise ConfigError("must be 'adamw'", _join(path, "adamw.kind"))
        adamw = _build(AdamWConfig, sub, _join(path, "adamw"))
        return _build(MuonConfig, data, path, skip=("adamw",), adamw=adamw)
    return _build(_INNER[kind], data, path)


def _stage(data: Any, index: int, model: ModelSpec, seed: int, base_dir: Optional[Path]):
    path = f"stages[{index}]"
    data = dict(_mapping(data, path))
    extra: dict = {}

    if "corpus" not in data:
        raise ConfigError("required", _join(path, "corpus"))
    corpus = dict(_mapping(data.pop("corpus"), _join(path, "corpus")))
    corpus.setdefault("vocab_size", model.vocab_size)
    corpus.setdefault("transition_seed", derive_seed(seed, "corpus"))
    corpus.setdefault("shift_id", data.get("name", "base"))
    if corpus.get("path") and base_dir is not None and not os.path.isabs(corpus["path"]):
        corpus["path"] = str(base_dir / corpus["path"])
    extra["corpus"] = _build(CorpusSpec, corpus, _join(path, "corpus"))

    extra["inner"] = _inner(data.pop("inner", None), _join(path, "inner"))
    if "outer" in data:
        outer = data.pop("outer")
        if outer is not None:
            extra["outer"] = _build(OuterConfig, _mapping(outer, _join(path, "outer")),
                                    _join(path, "outer"))
    flags = _mapping(data.pop("flags", None), _join(path, "flags"))
    for key, value in flags.items():
        if key not in _FLAGS:
            raise ConfigError("unknown flag", _join(path, f"flags.{key}"))
        extra[key] = _coerce(value, bool, _join(path, f"flags.{key}"))
    for key in _FLAGS:
        if key in data:
            raise ConfigError("flags belong under 'flags'", _join(path, key))
    data.setdefault("seed", derive_seed(seed, "stage", index))
    return _build(StageConfig, data, path, skip=("corpus", "inner", "outer") + _FLAGS, **extra)


def parse_config(raw: Any, seed_override: Optional[int] = None,
                 base_dir: Optional[Path] = None) -> RunConfig:
    data = dict(_mapping(raw, ""))
    allowed = {"seed", "output_dir", "report_formats", "model", "stages"}
    for key in data:
        if key not in allowed:
            raise ConfigError("unknown field", key)
    seed = _coerce(data.get("seed", 0), int, "seed")
    if seed_override is not None:
        seed = seed_override
    if not 0 <= seed < 2 ** 64:
        raise ConfigError("must be an unsigned 64-bit integer", "seed")

    model_data = dict(_mapping(data.get("model"), "model"))
    model_data.setdefault("init_seed", derive_seed(seed, "init"))
    model = _build(ModelSpec, model_data, "model")

    stages_raw = data.get("stages")
    if not isinstance(stages_raw, list) or not stages_raw:
        raise ConfigError("must be a non-empty list", "stages")
    stages = tuple(_stage(s, i, model, seed, base_dir) for i, s in enumerate(stages_raw))
    seen = set()
    for i, st in enumerate(stages):
        if not _NAME.fullmatch(st.name):
            raise ConfigError("must match [A-Za-z0-9_-]+", f"stages[{i}].name")
        if st.name in seen:
            raise ConfigError(f"duplicate stage name {st.name!r}", f"stages[{i}].name")
        seen.add(st.name)

    formats = _coerce(data.get("report_formats", list(REPORT_FORMATS)), tuple[str, ...],
                      "report_formats")
    for i, f in enumerate(formats):
        if f not in REPORT_FORMATS:
            raise ConfigError(f"must be one of {REPORT_FORMATS}", f"report_formats[{i}]")
    output_dir = _coerce(data.get("output_dir", "runs/default"), str, "output_dir")
    return RunConfig(model, stages, seed, output_dir, formats)


def load_config(path, seed_override: Optional[int] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"YAML parse error: {e}") from None
    return parse_config(raw, seed_override, path.parent)


def _plain(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None:
                continue
            out[f.name] = _plain(value)
        if "kind" in out:
            out = {"kind": out.pop("kind"), **out}
        return out
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    """Effective configuration as plain data, loadable by :func:`parse_config`."""
    stages = []
    for st in cfg.stages:
        d = _plain(st)
        d["flags"] = {key: d.pop(key) for key in _FLAGS}
        stages.append(d)
    return {
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "report_formats": list(cfg.report_formats),
        "model": _plain(cfg.model),
        "stages": stages,
    }


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
