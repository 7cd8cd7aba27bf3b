"""Flat ``section.key = value`` run configuration.

Every tunable default of the pipeline has a key here. Unknown keys and
unparsable values are rejected; ``dump`` echoes the full resolved config.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig, TrainConfig
from .postprocess import PostConfig
from .preprocess import PreprocessConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    r2_identity: bool = False
    time_points: int = 0  # 0: minimum over the cohort


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    post: PostConfig = field(default_factory=PostConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


SECTIONS = ("synth", "preprocess", "model", "train", "post", "eval")


def _parse(raw: str, kind: type, key: str):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _field_types(obj) -> dict[str, type]:
    # annotations are strings under postponed evaluation
    names = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: names.get(f.type, type(getattr(obj, f.name))) if isinstance(f.type, str) else f.type
            for f in dataclasses.fields(obj)}


def parse_config(text: str) -> RunConfig:
    values: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    seed = None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "seed":
            seed = raw
            continue
        section, _, name = key.partition(".")
        if section not in values or not name:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if name in values[section]:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        values[section][name] = raw

    base = RunConfig()
    kwargs = {"seed": _parse(seed, int, "seed") if seed is not None else base.seed}
    for section in SECTIONS:
        default = getattr(base, section)
        types = _field_types(default)
        given = {}
        for name, raw in values[section].items():
            if name not in types:
                raise ConfigError(f"unknown key {section}.{name!r}")
            given[name] = _parse(raw, types[name], f"{section}.{name}")
        try:
            kwargs[section] = dataclasses.replace(default, **given)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{section}: {exc}") from None
    return RunConfig(**kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(encoding="utf-8"))


def flat_items(cfg: RunConfig) -> list[tuple[str, object]]:
    items = [("seed", cfg.seed)]
    for section in SECTIONS:
        obj = getattr(cfg, section)
        items += [(f"{section}.{f.name}", getattr(obj, f.name)) for f in dataclasses.fields(obj)]
    return items


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in flat_items(cfg))
