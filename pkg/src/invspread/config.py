"""Run configuration: YAML in, validated dataclasses out, fully resolved YAML back."""

from __future__ import annotations

import dataclasses
import os
import re
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .augment import AugmentConfig
from .encoder import EncoderConfig
from .errors import ConfigError, InvSpreadError
from .losses import LossConfig
from .trainer import TrainConfig

_SAFE_NAME = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"  # "synthetic" or "cifar10"
    path: str | None = None
    train_limit: int | None = None
    test_limit: int | None = None
    num_clusters: int = 4
    points_per_cluster: int = 50
    test_points_per_cluster: int = 25
    dim: int = 32
    cluster_spread: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "cifar10"):
            raise ConfigError("must be 'synthetic' or 'cifar10'", field="kind")
        if self.kind == "cifar10" and not self.path:
            raise ConfigError("required for cifar10 datasets", field="path")


@dataclass(frozen=True)
class EvalConfig:
    knn_k: int = 200
    knn_tau: float = 0.1
    recall_ks: tuple[int, ...] = (1, 2, 4, 8)
    probe_epochs: int = 300
    probe_lr: float = 1.0
    nmi_restarts: int = 10
    histogram_knn: int = 5
    # name -> {fine class name or id: group}, one extra histogram per entry
    regroup: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.knn_k < 1:
            raise ConfigError("must be >= 1", field="knn_k")
        if not self.knn_tau > 0:
            raise ConfigError("must be > 0", field="knn_tau")


@dataclass(frozen=True)
class RunConfig:
    run_name: str = "run"
    output_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_name


# ---------------------------------------------------------------- building


def _line_index(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line number in the YAML source."""
    lines: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[path] = k.start_mark.line + 1
                walk(v, path)

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return lines


def _convert(value, tp, path: str, lines: dict):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    where = dict(field=path, line=lines.get(path))
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(value, inner[0], path, lines)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError("expected a mapping", **where)
        return _build(tp, value, path, lines)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError("expected a list", **where)
        elem = args[0] if args else Any
        return tuple(_convert(v, elem, f"{path}[{i}]", lines) for i, v in enumerate(value))
    if origin is dict or tp is dict:
        if not isinstance(value, dict):
            raise ConfigError("expected a mapping", **where)
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", **where)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", **where)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", **where)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", **where)
        return value
    return value


def _build(cls, data: dict, prefix: str, lines: dict):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            path = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f"unknown key (expected one of {sorted(names)})", field=path, line=lines.get(path))
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        kwargs[key] = _convert(value, hints[key], path, lines)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        path = f"{prefix}.{exc.field}" if prefix and exc.field else (exc.field or prefix)
        raise ConfigError(exc.message, field=path, line=lines.get(path) or lines.get(prefix)) from None
    except InvSpreadError as exc:
        # contract messages lead with the offending field name
        msg = str(exc)
        name = next((n for n in sorted(names, key=len, reverse=True) if msg.startswith(n)), None)
        path = (f"{prefix}.{name}" if prefix else name) if name else prefix or None
        raise ConfigError(msg, field=path, line=lines.get(path) or lines.get(prefix)) from None


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def preset_names() -> list[str]:
    root = resources.files("invspread") / "presets"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def preset_text(name: str) -> str:
    path = resources.files("invspread") / "presets" / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}", field="preset")
    return path.read_text()


def _parse(text: str, source: str) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"{source}: invalid YAML: {getattr(exc, 'problem', exc)}", line=mark.line + 1 if mark else None) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return data


def load_run_config(path=None, preset: str | None = None, overrides: dict | None = None, check_paths: bool = True) -> RunConfig:
    """Resolve a run configuration from a preset and/or a YAML file.

    Values in the file override the preset; ``overrides`` (a nested dict)
    override both. A file may also name its base preset with a top-level
    ``preset:`` key.
    """
    data: dict = {}
    lines: dict = {}
    file_data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        file_data = _parse(text, str(path))
        lines = _line_index(text)
        preset = file_data.pop("preset", None) or preset
    if preset is not None:
        text = preset_text(preset)
        data = _parse(text, f"preset {preset}")
        if path is None:
            lines = _line_index(text)
    data = _deep_merge(data, file_data)
    if overrides:
        data = _deep_merge(data, overrides)
    cfg = _build(RunConfig, data, "", lines)
    validate(cfg, lines, check_paths)
    return cfg


def validate(cfg: RunConfig, lines: dict | None = None, check_paths: bool = True) -> None:
    lines = lines or {}
    if not _SAFE_NAME.match(cfg.run_name):
        raise ConfigError("must contain only letters, digits, '.', '_' or '-'", field="run_name", line=lines.get("run_name"))
    ds = cfg.dataset
    if check_paths and ds.kind == "cifar10":
        p = Path(os.path.expandvars(ds.path))
        if not p.is_dir():
            raise ConfigError(f"dataset directory does not exist: {p}", field="dataset.path", line=lines.get("dataset.path"))


def to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_plain(v) for k, v in obj.items()}
    return obj


def dump_run_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_plain(cfg), sort_keys=False))


def with_train(cfg: RunConfig, **changes) -> RunConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **changes))


__all__ = [
    "AugmentConfig",
    "DatasetConfig",
    "EncoderConfig",
    "EvalConfig",
    "LossConfig",
    "RunConfig",
    "TrainConfig",
    "dump_run_config",
    "load_run_config",
    "preset_names",
    "to_plain",
    "with_train",
]
