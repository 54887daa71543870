"""Run configuration: TOML files, bundled presets and dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Tuple

import tomli

from .errors import ConfigError
from .model import ModelConfig

MODES = ("pretrain", "finetune", "scratch")
FORCE_MODES = ("direct", "gradient")


@dataclass(frozen=True)
class DataSource:
    id: str
    path: str = ""  # JSONL file, or
    synthetic: str = ""  # name of a synthetic domain preset
    count: int = 0  # synthetic corpus size (0 = preset default)
    gen_seed: int = 0
    split: Tuple[float, ...] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    split_mode: str = "random"
    max_train: int = 0  # 0 keeps the whole train split
    min_atoms: int = 0
    targets: Tuple[str, ...] = ("energy", "forces")
    atomwise_scalars: bool = True
    scalar_pooling: str = "sum"
    lambda_E: Optional[float] = None
    lambda_F: Optional[float] = None
    threshold: str = ""  # margin preset name
    energy_margin: Optional[float] = None
    force_margin: Optional[float] = None

    def __post_init__(self):
        if bool(self.path) == bool(self.synthetic):
            raise ConfigError(f"dataset {self.id!r}: set exactly one of 'path' or 'synthetic'")
        if not self.targets:
            raise ConfigError(f"dataset {self.id!r}: no targets")
        if "forces" in self.targets and "energy" not in self.targets:
            raise ConfigError(f"dataset {self.id!r}: force targets need the energy target")

    @property
    def scalar_targets(self) -> Tuple[str, ...]:
        return tuple(t for t in self.targets if t not in ("energy", "forces"))


@dataclass(frozen=True)
class LossConfig:
    reduction: str = "swl"  # or "naive"
    energy_distance: str = "l1"  # or "squared"
    threshold: bool = False
    pcgrad: bool = False

    def __post_init__(self):
        if self.reduction not in ("swl", "naive"):
            raise ConfigError(f"loss.reduction must be 'swl' or 'naive', got {self.reduction!r}")
        if self.energy_distance not in ("l1", "squared"):
            raise ConfigError(f"loss.energy_distance must be 'l1' or 'squared', got {self.energy_distance!r}")


@dataclass(frozen=True)
class OptimConfig:
    betas: Tuple[float, ...] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1
    ema_decay: float = 0.99
    clip_grad_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError("optim.betas must be two values in [0, 1)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("optim.ema_decay must lie in [0, 1)")


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 8e-5
    warmup: float = 5.0
    warmup_unit: str = "epochs"
    warmup_factor: float = 0.1
    cos_duration: float = 32.0
    cos_unit: str = "epochs"
    cos_final_factor: float = 0.1
    rlp_enabled: bool = True
    rlp_patience: int = 5
    rlp_factor: float = 0.1
    llrd: str = "large"  # large | small | none


@dataclass(frozen=True)
class MixConfig:
    temperature: float = 2.0
    batch_size: int = 16
    mode: str = "per_slot"


@dataclass(frozen=True)
class StopConfig:
    patience: int = 50
    max_epochs: int = 500
    min_lr: float = 1e-8
    max_wallclock_s: Optional[float] = None


@dataclass(frozen=True)
class RunConfig:
    mode: str = "pretrain"
    seed: int = 0
    datasets: Tuple[DataSource, ...] = ()
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    early_stop: StopConfig = field(default_factory=StopConfig)
    epochs: int = 2  # fixed length of pretraining
    max_steps: int = 0  # hard cap on optimizer steps (0 = none)
    force_mode: str = "direct"
    eval_with_ema: bool = True
    eval_batch_size: int = 32
    checkpoint_every: int = 0  # steps; 0 writes only the final checkpoint
    init_checkpoint: str = ""
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.force_mode not in FORCE_MODES:
            raise ConfigError(f"force_mode must be one of {FORCE_MODES}, got {self.force_mode!r}")
        if not self.datasets:
            raise ConfigError("at least one dataset is required")
        ids = [d.id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate dataset ids in {ids}")
        if self.mode == "pretrain" and not any("forces" in d.targets for d in self.datasets):
            raise ConfigError("pretraining needs at least one dataset with energy and force labels")
        if self.force_mode == "gradient" and not self.model.second_order:
            raise ConfigError("gradient force mode requires model.second_order = true")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Digest of everything that shapes the trajectory (not run length or output)."""
        data = self.to_json()
        for key in ("output_dir", "max_steps", "checkpoint_every"):
            data.pop(key)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- dict -> dataclass with strict checking ----------------------------------


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, key):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a table, got {type(value).__name__}")
        return from_dict(tp, value, key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        elem = args[0] if args else object
        return tuple(_coerce(v, elem, f"{key}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if tp is object:
        return value
    raise ConfigError(f"{key}: unsupported field type {_type_name(tp)}")


def from_dict(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{prefix}." if prefix else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        key = f"{prefix}.{name}" if prefix else name
        tp = hints[name]
        if name == "datasets" and cls is RunConfig:
            if not isinstance(value, (list, tuple)):
                raise ConfigError("datasets: expected an array of tables")
            kwargs[name] = tuple(_coerce(v, DataSource, f"datasets[{i}]") for i, v in enumerate(value))
        else:
            kwargs[name] = _coerce(value, tp, key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix or cls.__name__}: {exc}") from None


# -- presets, merging, overrides ---------------------------------------------


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("jointpt.presets").iterdir() if p.name.endswith(".toml"))


def load_preset_dict(name: str) -> dict:
    path = resources.files("jointpt.presets") / f"{name}.toml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return _resolve(tomli.loads(path.read_text(encoding="utf-8")), seen=(name,))


def _merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _resolve(data: dict, seen=()) -> dict:
    """Expand ``base = "<preset>"`` inheritance."""
    data = dict(data)
    base = data.pop("base", None)
    if base is None:
        return data
    if not isinstance(base, str):
        raise ConfigError("base: expected a preset name")
    if base in seen:
        raise ConfigError(f"preset inheritance cycle through {base!r}")
    path = resources.files("jointpt.presets") / f"{base}.toml"
    if not path.is_file():
        raise ConfigError(f"unknown base preset {base!r}")
    parent = _resolve(tomli.loads(path.read_text(encoding="utf-8")), seen + (base,))
    return _merge(parent, data)


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(data: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value``; list elements are addressed by integer index."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    data = json.loads(json.dumps(data))  # deep copy of plain data
    node = data
    for depth, part in enumerate(parts[:-1]):
        if isinstance(node, list):
            try:
                node = node[int(part)]
            except (ValueError, IndexError):
                raise ConfigError(f"override {key!r}: no list element {part!r}") from None
        else:
            node = node.setdefault(part, {})
        if not isinstance(node, (dict, list)):
            raise ConfigError(f"override {key!r}: {'.'.join(parts[: depth + 1])} is not a table")
    last = parts[-1]
    value = _parse_value(raw.strip())
    if isinstance(node, list):
        try:
            node[int(last)] = value
        except (ValueError, IndexError):
            raise ConfigError(f"override {key!r}: no list element {last!r}") from None
    else:
        node[last] = value
    return data


def build_config(data: dict, overrides=()) -> RunConfig:
    data = _resolve(data)
    for item in overrides:
        data = apply_override(data, item)
    return from_dict(RunConfig, data)


def load_config(path, overrides=()) -> RunConfig:
    """Read a TOML run config (or a bundled preset name) and apply overrides."""
    p = Path(path)
    if p.is_file():
        try:
            data = tomli.loads(p.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    else:
        data = {"base": str(path)}
    return build_config(data, overrides)


def config_to_toml(config: RunConfig) -> str:
    import tomli_w

    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items() if v is not None}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        return obj

    return tomli_w.dumps(clean(config.to_json()))
