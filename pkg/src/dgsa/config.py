"""Run configuration: one flat key=value namespace over model, training and data.

Keys shared by two sections (``n_classes``, ``vocab_size``, ``image_size``,
``channels``, ``max_seq_len``) are set once and fed to both.  Unknown keys are
errors.  ``out_dir`` is the only key outside the three sections.

A config argument is either a file path or the name of a shipped preset
(``text-tiny``, ``vision-tiny``, ``text-paper``, ``vision-paper``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import schema
from .data import DatasetSpec
from .errors import ConfigError, UsageError
from .models import ModelConfig
from .training import TrainConfig

SECTIONS = (ModelConfig, TrainConfig, DatasetSpec)
EXTRA_KEYS = {"out_dir": str}


def schema_keys() -> dict[str, type]:
    keys = dict(EXTRA_KEYS)
    for cls in SECTIONS:
        for name, kind in schema.field_types(cls).items():
            if name in keys and keys[name] is not kind:
                raise AssertionError(f"shared key {name} has conflicting types")
            keys[name] = kind
    return keys


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    out_dir: str = "runs/default"

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        known = schema_keys()
        unknown = sorted(set(pairs) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for k, v in pairs.items():
            schema.parse_value(known[k], v)
        out = cls(model=schema.build(ModelConfig, pairs), train=schema.build(TrainConfig, pairs),
                  data=schema.build(DatasetSpec, pairs),
                  out_dir=pairs.get("out_dir", cls.out_dir))
        out.check_consistency()
        return out

    def pairs(self) -> dict[str, str]:
        out = {"out_dir": self.out_dir}
        for section in (self.model, self.train, self.data):
            for f in dataclasses.fields(section):
                out[f.name] = schema.format_value(getattr(section, f.name))
        return out

    def canonical(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in sorted(self.pairs().items()))

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        merged = self.pairs()
        merged.update(overrides)
        return RunConfig.from_pairs(merged)

    def check_consistency(self):
        m, d = self.model, self.data
        if m.task == "text" and d.data_kind not in ("synth_text", "csv_text"):
            raise ConfigError(f"task=text cannot use data_kind={d.data_kind}")
        if m.task == "vision" and d.data_kind not in ("synth_vision", "idx_images"):
            raise ConfigError(f"task=vision cannot use data_kind={d.data_kind}")
        if d.data_kind == "synth_text" and d.seq_len > m.max_seq_len:
            raise ConfigError(f"seq_len={d.seq_len} exceeds max_seq_len={m.max_seq_len}")


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("dgsa.configs").iterdir()
                  if p.name.endswith(".cfg"))


def read_config_text(source: str) -> tuple[str, str]:
    """(text, label) for a path or preset name."""
    path = Path(source)
    if path.is_file():
        return path.read_text(encoding="utf-8"), str(path)
    preset = resources.files("dgsa.configs") / f"{source}.cfg"
    if preset.is_file():
        return preset.read_text(encoding="utf-8"), f"preset:{source}"
    raise UsageError(f"config file not found: {source}")


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_run_config(source: str | None, overrides=None) -> RunConfig:
    pairs = {}
    if source is not None:
        text, label = read_config_text(source)
        pairs = schema.parse_lines(text, label)
    pairs.update(overrides or {})
    return RunConfig.from_pairs(pairs)
