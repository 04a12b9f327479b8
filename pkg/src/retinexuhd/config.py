"""Model/loss configuration, the desk/full presets, and dotted-key overrides.

Configs are plain dataclasses so the CLI can load them from YAML, apply
``--set a.b=c`` overrides with type checking, and reject unknown keys.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any

import yaml

from .errors import ConfigurationError


@dataclass
class GssmConfig:
    """Sizes of the grouped state-space machinery inside one block."""

    state_dim: int = 8          # N
    num_embeddings: int = 64    # T, rows of the local bank
    embed_rank: int = 32        # r, inner rank of local x global factorization
    expand: float = 1.0         # inner scan width = expand * input channels
    pos_table_size: int = 16    # learnable positional table, bilinearly resized
    temperature: float = 1.0    # gumbel temperature for policy sampling


@dataclass
class SambConfig:
    """Reflectance-branch layout."""

    level_widths: tuple[int, int, int] = (16, 32, 64)
    num_gssb: int = 1
    dilation_rates: tuple[int, int, int] = (1, 2, 3)  # per intra-block scale

    def validate(self) -> None:
        if len(self.dilation_rates) != 3:
            raise ConfigurationError("samba.dilation_rates must have length 3")
        if list(self.level_widths) != sorted(self.level_widths):
            raise ConfigurationError("samba.level_widths must be non-decreasing")


@dataclass
class FiaConfig:
    """Illumination-branch layout."""

    width: int = 16
    num_blocks: int = 2


@dataclass
class AblationConfig:
    """Architecture switches; each removes exactly one structural piece."""

    no_samba: bool = False       # reflectance correction off, R = R_eff
    no_fia: bool = False         # illumination correction off, L = L_eff
    no_gssb: bool = False        # state-space mixer bypassed (gates held open)
    no_multiscale: bool = False  # single-scale feature pyramid inside each block
    no_fourier: bool = False     # spectral path in the illumination blocks bypassed


@dataclass
class ModelConfig:
    base_channels: int = 16      # decomposer width
    samba: SambConfig = field(default_factory=SambConfig)
    gssm: GssmConfig = field(default_factory=GssmConfig)
    fia: FiaConfig = field(default_factory=FiaConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    max_pixels: int | None = None  # single-pass inference budget; larger inputs must tile

    def validate(self) -> None:
        self.samba.validate()
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be positive")


def desk_model_config() -> ModelConfig:
    return ModelConfig(max_pixels=1 << 20)


def full_model_config() -> ModelConfig:
    return ModelConfig(
        base_channels=40,
        samba=SambConfig(level_widths=(40, 80, 160), num_gssb=2),
        gssm=GssmConfig(state_dim=16, num_embeddings=128, embed_rank=64),
        # width 64 rather than 32: four blocks at 32 come to ~0.055M parameters,
        # far below the 0.15-0.25M window the branch is sized for; 64 lands at ~0.22M.
        fia=FiaConfig(width=64, num_blocks=4),
        max_pixels=1 << 24,
    )


MODEL_PRESETS = {"desk": desk_model_config, "full": full_model_config}


def model_config_for_preset(name: str) -> ModelConfig:
    try:
        return MODEL_PRESETS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown preset '{name}' (expected one of {sorted(MODEL_PRESETS)})") from None


# ---------------------------------------------------------------------------
# dotted-key overrides and (de)serialization


_BOOL_STRINGS = {"true": True, "false": False, "on": True, "off": False, "1": True, "0": False}


def _coerce(raw: str, target_type: Any, path: str) -> Any:
    if target_type is bool or target_type == "bool":
        key = raw.strip().lower()
        if key not in _BOOL_STRINGS:
            raise ConfigurationError(f"{path}: cannot parse '{raw}' as bool")
        return _BOOL_STRINGS[key]
    origin = getattr(target_type, "__origin__", None)
    if origin is tuple:
        parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
        inner = target_type.__args__[0]
        return tuple(_coerce(p.strip(), inner, path) for p in parts)
    # optional ints (e.g. max_pixels: int | None)
    if str(target_type).startswith("int") or target_type is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigurationError(f"{path}: cannot parse '{raw}' as int") from None
    if target_type is float or str(target_type).startswith("float"):
        try:
            return float(raw)
        except ValueError:
            raise ConfigurationError(f"{path}: cannot parse '{raw}' as float") from None
    if "None" in str(target_type):  # int | None fields arrive as strings
        if raw.strip().lower() in ("none", "null"):
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigurationError(f"{path}: cannot parse '{raw}'") from None
    return raw


def apply_override(cfg: Any, dotted_key: str, raw_value: str) -> None:
    """Set ``cfg.a.b.c = parse(raw_value)`` in place, rejecting unknown keys."""
    parts = dotted_key.split(".")
    target = cfg
    for part in parts[:-1]:
        if not is_dataclass(target) or part not in {f.name for f in fields(target)}:
            raise ConfigurationError(f"unknown config key '{dotted_key}' (no section '{part}')")
        target = getattr(target, part)
    leaf = parts[-1]
    if not is_dataclass(target):
        raise ConfigurationError(f"unknown config key '{dotted_key}'")
    by_name = {f.name: f for f in fields(target)}
    if leaf not in by_name:
        raise ConfigurationError(f"unknown config key '{dotted_key}' (no field '{leaf}')")
    current = getattr(target, leaf)
    if isinstance(current, tuple):
        parts = [p.strip() for p in raw_value.replace("(", "").replace(")", "").split(",") if p.strip()]
        elem_type = type(current[0]) if current else str
        setattr(target, leaf, tuple(_coerce(p, elem_type, dotted_key) for p in parts))
        return
    target_type = type(current) if current is not None else by_name[leaf].type
    setattr(target, leaf, _coerce(raw_value, target_type, dotted_key))


def to_dict(cfg: Any) -> dict:
    return dataclasses.asdict(cfg)


def _fill_dataclass(cls, data: dict, path: str = ""):
    by_name = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in by_name:
            where = f"{path}.{key}" if path else key
            raise ConfigurationError(f"unknown config key '{where}'")
        f = by_name[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if is_dataclass(default) and isinstance(value, dict):
            kwargs[key] = _fill_dataclass(type(default), value, f"{path}.{key}" if path else key)
        elif isinstance(default, tuple) and isinstance(value, (list, tuple)):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def model_config_from_dict(data: dict) -> ModelConfig:
    cfg = _fill_dataclass(ModelConfig, data)
    cfg.validate()
    return cfg


def load_model_config(path: str) -> ModelConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping at top level")
    return model_config_from_dict(data)
