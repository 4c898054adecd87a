"""Run configuration: INI sections mapped onto dataclasses, with dotted command-line overrides.

Sections: ``[model]``, ``[train]``, ``[data]``, ``[synthetic]`` and ``[export]``.
Every field is reachable as ``--section.field VALUE``.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional, Tuple

from .errors import ConfigError, ValidationError
from .meta import MetaSchema
from .model import CLASS_TOKEN_MODES, FUSION_KINDS, PRESETS, ModelConfig, preset
from .synthetic import SyntheticWorldSpec
from .train import TrainConfig
from .viz import IMAGE_MODES


@dataclass(frozen=True)
class ModelSection:
    preset: str = "tiny"
    num_classes: Optional[int] = None
    image_size: Optional[int] = None
    class_token_mode: Optional[str] = None
    head_dim: Optional[int] = None
    mlp_ratio: Optional[int] = None
    max_drop_path: Optional[float] = None
    aggregate_fusion: Optional[str] = None
    meta: str = "geo,datetime"  # comma-separated channel kinds; empty for image-only

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValidationError("model.preset", f"unknown preset {self.preset!r}; valid: {sorted(PRESETS)}")
        if self.class_token_mode is not None and self.class_token_mode not in CLASS_TOKEN_MODES:
            raise ValidationError("model.class_token_mode", f"must be one of {CLASS_TOKEN_MODES}")
        if self.aggregate_fusion is not None and self.aggregate_fusion not in FUSION_KINDS:
            raise ValidationError("model.aggregate_fusion", f"must be one of {FUSION_KINDS}")

    @property
    def meta_kinds(self) -> Tuple[str, ...]:
        return tuple(k.strip() for k in self.meta.split(",") if k.strip())

    def build(self, data_schema: MetaSchema, num_classes: Optional[int] = None) -> ModelConfig:
        """Model config whose meta schema is the requested subset of the dataset's channels."""
        have = {c.kind: c for c in data_schema.channels}
        missing = [k for k in self.meta_kinds if k not in have]
        if missing:
            raise ValidationError("model.meta", f"channels {missing} are not in the dataset schema "
                                                f"{sorted(have)}")
        overrides = {f.name: getattr(self, f.name) for f in fields(self)
                     if f.name not in ("preset", "meta") and getattr(self, f.name) is not None}
        if "num_classes" not in overrides and num_classes is not None:
            overrides["num_classes"] = num_classes
        overrides["meta"] = MetaSchema(tuple(have[k] for k in self.meta_kinds))
        try:
            return preset(self.preset, **overrides)
        except ConfigError as exc:
            raise ValidationError("model", str(exc)) from exc


@dataclass(frozen=True)
class DataSection:
    train: str = ""  # MFDS path; empty -> generate from [synthetic]
    test: str = ""

    def __post_init__(self):
        if bool(self.train) != bool(self.test):
            raise ValidationError("data", "set both data.train and data.test, or neither")


@dataclass(frozen=True)
class ExportSection:
    out_dir: str = "run"
    category: int = 0
    grid_h: int = 50
    grid_w: int = 100
    month: Optional[float] = None
    hour: Optional[float] = None
    image_mode: str = "mean"
    sample_index: int = 0
    k_vision: int = 5
    k_word: int = 3
    stage: int = 4

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValidationError("export.grid_h", "grid dimensions must be >= 1")
        if self.image_mode not in IMAGE_MODES:
            raise ValidationError("export.image_mode", f"must be one of {IMAGE_MODES}")
        if self.stage not in (3, 4):
            raise ValidationError("export.stage", "must be 3 or 4")


SECTIONS = {
    "model": ModelSection,
    "train": TrainConfig,
    "data": DataSection,
    "synthetic": SyntheticWorldSpec,
    "export": ExportSection,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    synthetic: SyntheticWorldSpec = field(default_factory=SyntheticWorldSpec)
    export: ExportSection = field(default_factory=ExportSection)


def field_types(cls) -> Dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def parse_value(raw: str, tp, name: str):
    """Convert the string ``raw`` to the annotated type ``tp``."""
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        return parse_value(raw, args[0], name)
    s = raw.strip()
    try:
        if tp is bool:
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if tp is int:
            return int(s)
        if tp is float:
            return float(s)
        if tp is str:
            return s
    except ValueError:
        raise ValidationError(name, f"cannot parse {raw!r} as {tp.__name__}") from None
    raise ValidationError(name, f"unsupported field type {tp}")


def _build_section(name: str, values: Dict[str, str]):
    cls = SECTIONS[name]
    types = field_types(cls)
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise ValidationError(f"{name}.{key}", f"unknown key; valid keys: {sorted(types)}")
        kwargs[key] = parse_value(raw, types[key], f"{name}.{key}")
    try:
        return cls(**kwargs)
    except ValidationError:
        raise
    except (ConfigError, ValueError, TypeError) as exc:
        raise ValidationError(name, str(exc)) from exc


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None,
                    env: Optional[Dict[str, str]] = None) -> RunConfig:
    """Read ``path`` (optional), apply ``section.key`` overrides, then ``MF_SEED``.

    All validation happens here, before any compute.
    """
    raw: Dict[str, Dict[str, str]] = {name: {} for name in SECTIONS}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ValidationError("config", f"config file not found: {p}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise ValidationError("config", f"{p}: {exc}") from exc
        for section in parser.sections():
            if section not in SECTIONS:
                raise ValidationError(section, f"unknown section; valid sections: {sorted(SECTIONS)}")
            raw[section].update(parser[section])
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ValidationError(dotted, "overrides must look like section.key")
        raw[section][key] = value
    env = os.environ if env is None else env
    if env.get("MF_SEED"):
        raw["train"]["seed"] = env["MF_SEED"]
    return RunConfig(**{name: _build_section(name, values) for name, values in raw.items()})


def all_flags() -> Dict[str, Tuple[str, type, object]]:
    """``--section.field`` -> (section, type, default) for every config field."""
    out = {}
    for name, cls in SECTIONS.items():
        types = field_types(cls)
        for f in fields(cls):
            default = f.default if f.default is not dataclasses.MISSING else None
            out[f"--{name}.{f.name}"] = (name, types[f.name], default)
    return out


def render_ini(cfg: RunConfig) -> str:
    """Serialise a RunConfig back to INI text (``None`` fields are left out)."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        section = getattr(cfg, name)
        for f in fields(section):
            v = getattr(section, f.name)
            if v is not None:
                lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)
