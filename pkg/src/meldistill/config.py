"""Experiment configuration: defaults, JSON config files, and dotted-flag overrides.

Precedence is total: built-in defaults < config file < command-line flags.
Flags address nested fields as --section.key=value (e.g. --inversion.tau=0.05).
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from .audio import MODE_TD, MODE_TID
from .distill import DistillSettings
from .errors import ConfigError
from .inversion import InversionSettings

METHODS = (
    "frami_full",
    "frami_no_finv",
    "frami_no_reused",
    "frami_no_finv_no_reused",
    "adi_baseline",
    "vanilla_kd",
    "scratch_student",
)


@dataclass(frozen=True)
class MethodPolicy:
    """What a method selector turns on: inversion style and distillation terms."""

    name: str
    data_free: bool
    use_fic: bool
    use_finv: bool
    use_reused: bool
    distill_from_teacher: bool


POLICIES: dict[str, MethodPolicy] = {
    "frami_full": MethodPolicy("frami_full", True, True, True, True, True),
    "frami_no_finv": MethodPolicy("frami_no_finv", True, True, False, True, True),
    "frami_no_reused": MethodPolicy("frami_no_reused", True, True, True, False, True),
    "frami_no_finv_no_reused": MethodPolicy("frami_no_finv_no_reused", True, True, False, False, True),
    "adi_baseline": MethodPolicy("adi_baseline", True, False, False, False, True),
    "vanilla_kd": MethodPolicy("vanilla_kd", False, False, False, False, True),
    "scratch_student": MethodPolicy("scratch_student", False, False, False, False, False),
}


@dataclass
class DataSettings:
    kind: str = "synthetic"  # synthetic | dirs
    train_dir: str = ""
    eval_dir: str = ""
    class_count: int = 4
    items_per_class: int = 24
    eval_items_per_class: int = 12
    duration_s: float = 2.0
    mode: str = MODE_TID
    mel_bins: int = 40

    def validate(self) -> None:
        if self.kind not in ("synthetic", "dirs"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'dirs', got {self.kind!r}")
        if self.kind == "dirs":
            if not self.train_dir or not self.eval_dir:
                raise ConfigError("data.kind='dirs' needs data.train_dir and data.eval_dir")
            for label, directory in (("train_dir", self.train_dir), ("eval_dir", self.eval_dir)):
                if not (Path(directory) / "corpus.json").exists():
                    raise ConfigError(f"data.{label}: no corpus at {directory}")
        if self.mode not in (MODE_TID, MODE_TD):
            raise ConfigError(f"data.mode must be TID or TD, got {self.mode!r}")


@dataclass
class ArchSettings:
    teacher: str = "tiny_t"
    student: str = "tiny_s"
    disc_hidden: int = 256
    disc_out: int = 128


@dataclass
class TeacherTrainSettings:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    patience: int = 5


@dataclass
class RunSettings:
    epochs: int = 30
    precision: str = "float32"  # float32 | float64

    def validate(self) -> None:
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"run.precision must be float32 or float64, got {self.precision!r}")
        if self.epochs < 1:
            raise ConfigError("run.epochs must be >= 1")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


@dataclass
class ExperimentConfig:
    method: str = "frami_full"
    seed: int = 0
    out_dir: str = "runs/exp"
    single_thread: bool = False
    teacher_checkpoint: str = ""
    data: DataSettings = field(default_factory=DataSettings)
    arch: ArchSettings = field(default_factory=ArchSettings)
    teacher_train: TeacherTrainSettings = field(default_factory=TeacherTrainSettings)
    inversion: InversionSettings = field(default_factory=InversionSettings)
    distill: DistillSettings = field(default_factory=DistillSettings)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self) -> "ExperimentConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        self.data.validate()
        self.run.validate()
        self.inversion.mode = self.data.mode
        self.inversion.validate()
        self.distill.validate()
        return self

    @property
    def policy(self) -> MethodPolicy:
        return POLICIES[self.method]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = ("data", "arch", "teacher_train", "inversion", "distill", "run")
_TOP_FIELDS = ("method", "seed", "out_dir", "single_thread", "teacher_checkpoint")


def _coerce(value: Any, target_type: type, where: str) -> Any:
    if isinstance(value, str):
        if target_type is bool:
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ConfigError(f"{where}: cannot parse {value!r} as bool")
        if target_type in (int, float):
            try:
                return target_type(value)
            except ValueError as exc:
                raise ConfigError(f"{where}: cannot parse {value!r} as {target_type.__name__}") from exc
        return value
    if target_type is bool and not isinstance(value, bool):
        raise ConfigError(f"{where}: expected bool, got {value!r}")
    if target_type is float and isinstance(value, (int, float)):
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected int, got {value!r}")
        return value
    return value


def _set_field(obj: Any, name: str, value: Any, where: str) -> None:
    match = {f.name: f for f in fields(obj)}
    if name not in match:
        raise ConfigError(f"unknown config key {where!r}")
    ftype = match[name].type
    base = {"int": int, "float": float, "str": str, "bool": bool}.get(
        ftype if isinstance(ftype, str) else getattr(ftype, "__name__", ""), None
    )
    if base is None:
        raise ConfigError(f"{where}: field is a section, not a value")
    setattr(obj, name, _coerce(value, base, where))


def apply_mapping(cfg: ExperimentConfig, mapping: dict, source: str) -> None:
    """Apply a nested {section: {key: value}} or flat top-level mapping."""
    for key, value in mapping.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{source}: section {key!r} must be an object")
            section = getattr(cfg, key)
            for sub, sub_value in value.items():
                _set_field(section, sub, sub_value, f"{key}.{sub}")
        elif key in _TOP_FIELDS:
            _set_field(cfg, key, value, key)
        else:
            raise ConfigError(f"{source}: unknown config key {key!r}")


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> None:
    """Apply flat dotted-key overrides like {'inversion.tau': '0.05'}."""
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if len(parts) == 1 and parts[0] in _TOP_FIELDS:
            _set_field(cfg, parts[0], value, dotted)
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            _set_field(getattr(cfg, parts[0]), parts[1], value, dotted)
        else:
            raise ConfigError(f"unknown override key {dotted!r}")


def load_config(
    config_path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> ExperimentConfig:
    """Defaults, then the JSON file, then flag overrides; validated at the end."""
    cfg = ExperimentConfig()
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            mapping = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(mapping, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        apply_mapping(cfg, mapping, str(path))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()
