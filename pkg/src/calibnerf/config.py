"""Run configuration: JSON files merged with dotted ``--section.key value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .encoder import EncoderConfig
from .scene import SyntheticSceneSpec
from .train import TrainConfig
from .transformer import StackConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    width: int = 64
    height: int = 64
    train_scenes: int = 8
    eval_scenes: int = 2
    seed: int = 0
    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)


@dataclass
class EvalConfig:
    n_refs: list = field(default_factory=lambda: [1, 2, 3])
    batch_size: int = 1024
    views_per_scene: int = 0  # 0: every view of the scene is a target


@dataclass
class AblationConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    n_refs: int = 1
    variants: list = field(default_factory=list)  # empty: the full grid


SECTIONS = {
    "data": DataConfig,
    "encoder": EncoderConfig,
    "stack": StackConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        if cls is DataConfig and k == "scene":
            v = _build(SyntheticSceneSpec, v, f"{where}.scene")
        elif isinstance(v, list) and k not in ("n_refs", "seeds", "variants"):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stack: StackConfig = field(default_factory=StackConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        return cls(**{k: _build(SECTIONS[k], v, k) for k, v in d.items()})

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def sections(self) -> dict:
        return {k: getattr(self, k) for k in SECTIONS}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``("section.key[.sub]", value)`` pairs to a nested dict copy."""
    d = json.loads(json.dumps(d))
    for path, value in overrides:
        keys = path.split(".")
        if len(keys) < 2 or keys[0] not in SECTIONS:
            raise ConfigError(f"override {path!r}: expected <section>.<key> with section in {sorted(SECTIONS)}")
        node = d.setdefault(keys[0], {})
        for k in keys[1:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = _parse_value(value) if isinstance(value, str) else value
    return d


def preset(name: str) -> dict:
    """Bundled preset by name (``benchmark``, ``overfit``, ``smoke``)."""
    try:
        text = resources.files("calibnerf.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"no bundled preset named {name!r}") from exc
    return json.loads(text)


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a JSON config file (or a bundled preset name) and merge overrides over it."""
    base = {}
    if path is not None:
        p = Path(path)
        if p.exists():
            try:
                base = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        else:
            base = preset(str(path))
    return RunConfig.from_dict(apply_overrides(base, overrides))
