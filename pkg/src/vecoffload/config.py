"""Scenario configuration: nested frozen dataclasses loaded from YAML.

Unknown keys are rejected with the line they came from.  ``--set a.b=v``
overrides are parsed as YAML scalars and applied before validation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field

import yaml

from .env import EnvConfig
from .marl import PpoConfig
from .radio import ChannelConfig, MobilityConfig
from .simcore import SimConfig
from .workload import WorkloadStats


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    transitions_per_epoch: int = 4000
    # "episode": a fresh uniform reservation for every episode; "epoch": one per epoch
    reservation_resample: str = "episode"
    reservation_low: float = 0.05
    eval_reservations: int = 8

    def __post_init__(self):
        if self.epochs < 0 or self.transitions_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and transitions_per_epoch >= 1")
        if self.reservation_resample not in ("episode", "epoch"):
            raise ValueError("reservation_resample must be 'episode' or 'epoch'")
        if not 0 <= self.reservation_low < 1:
            raise ValueError("reservation_low must lie in [0, 1)")


@dataclass(frozen=True)
class ReserveConfig:
    window_offloads: int = 100
    warmup_windows: int = 40
    guided_windows: int = 60
    eta1: float = 0.02
    eta2: float = 0.02
    tau: float = 0.05
    noise_var: float = 1e-4
    standardize: bool = True
    max_points: int = 512
    update_rule: str = "descent"
    latency_unit_ms: float = 100.0
    warmup_low: float = 0.05
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.window_offloads < 1:
            raise ValueError("window_offloads must be >= 1")
        if self.update_rule not in ("descent", "printed"):
            raise ValueError("update_rule must be 'descent' or 'printed'")
        if self.tau <= 0 or self.latency_unit_ms <= 0:
            raise ValueError("tau and latency_unit_ms must be positive")


@dataclass(frozen=True)
class BaselineConfig:
    grid_step: float = 0.02
    calibration_windows: int = 5

    def __post_init__(self):
        if not 0 < self.grid_step <= 1:
            raise ValueError("grid_step must lie in (0, 1]")


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    mobility: MobilityConfig = field(default_factory=MobilityConfig)
    workload: WorkloadStats = field(default_factory=WorkloadStats)
    sim: SimConfig = field(default_factory=SimConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    reserve: ReserveConfig = field(default_factory=ReserveConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    sweep_vehicles: tuple[int, ...] = (2, 4, 6, 8, 10)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ConfigError(ValueError):
    pass


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node, deep=False):
    mapping = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=deep)
        value = loader.construct_object(value_node, deep=deep)
        mapping[key] = value
    lines = {loader.construct_object(k, deep=deep): k.start_mark.line + 1 for k, _ in node.value}
    return _Mapping(mapping, lines)


class _Mapping(dict):
    def __init__(self, data, lines):
        super().__init__(data)
        self.lines = lines


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, where)
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent-only literals such as 1e9 as strings
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data, where: str = "config"):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    lines = getattr(data, "lines", {})
    kwargs = {}
    for key, value in data.items():
        name = f"{where}.{key}"
        loc = name + (f" (line {lines[key]})" if key in lines else "")
        if key not in names:
            raise ConfigError(f"unknown key {loc}")
        tp = hints[key]
        kwargs[key] = _coerce(tp, value, name if dataclasses.is_dataclass(tp) else loc)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from exc


def _set_path(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {p} is not a section")
    node[parts[-1]] = value


def parse_overrides(items) -> dict:
    tree: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(tree, key.strip(), yaml.safe_load(raw))
    return tree


def _merge(base: dict, extra: dict) -> dict:
    out = _Mapping(dict(base), dict(getattr(base, "lines", {})))
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=None, text: str | None = None) -> ScenarioConfig:
    if text is None and path is not None:
        with open(path) as fh:
            text = fh.read()
    try:
        data = yaml.load(text, Loader=_LineLoader) if text else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc
    data = data or _Mapping({}, {})
    if overrides:
        data = _merge(data, parse_overrides(overrides) if not isinstance(overrides, dict)
                      else overrides)
    return _build(ScenarioConfig, data)


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
