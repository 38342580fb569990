"""Run configuration: defaults, config-file parsing, and overrides.

A run is described by one INI-style file with sections [data], [model],
[align], [train], [eval], [paths]. Every field has a coded default;
file values override defaults and command-line flags override both.
"""

import configparser
import os
from dataclasses import dataclass, field, fields
from typing import Optional, Tuple

from .alignment import AlignmentConfig
from .backbone import EncoderConfig
from .data import SyntheticSceneConfig
from .errors import ConfigurationError
from .training import TrainConfig

ENV_DATA_DIR = "STARS_DATA_DIR"
ENV_OUT_DIR = "STARS_OUT_DIR"


@dataclass
class RunConfig:
    scene: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig.tiny)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str = ""
    out_dir: str = ""
    eval_mode: str = "both"
    eval_branch: str = "fused"
    model_kind: str = "stars"
    baseline_modality: str = "m1"
    translate_first_kernel: int = 1
    lateral_width: Optional[int] = None

    def __post_init__(self):
        if not self.data_dir:
            self.data_dir = os.environ.get(ENV_DATA_DIR, "data")
        if not self.out_dir:
            self.out_dir = os.environ.get(ENV_OUT_DIR, "runs")

    def validate(self) -> None:
        self.scene.validate()
        self.encoder.validate()
        self.train.validate()
        if self.eval_mode not in ("both", "m1_only", "m2_only"):
            raise ConfigurationError(f"unknown eval mode {self.eval_mode!r}")
        if self.eval_branch not in ("fused", "m1", "m2"):
            raise ConfigurationError(f"unknown eval branch {self.eval_branch!r}")
        if self.model_kind not in ("stars", "baseline"):
            raise ConfigurationError(f"unknown model kind {self.model_kind!r}")
        if self.baseline_modality not in ("m1", "m2"):
            raise ConfigurationError(f"unknown modality {self.baseline_modality!r}")
        if self.translate_first_kernel not in (1, 3):
            raise ConfigurationError("translate_first_kernel must be 1 or 3")


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {raw!r}")


def _parse_float_tuple(raw: str) -> Tuple[float, ...]:
    try:
        return tuple(float(x) for x in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigurationError(f"expected comma-separated numbers, got {raw!r}") from exc


def _parse_int_tuple(raw: str) -> Tuple[int, ...]:
    try:
        return tuple(int(x) for x in raw.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigurationError(f"expected comma-separated integers, got {raw!r}") from exc


def _set_typed(obj, name: str, raw: str) -> None:
    current = getattr(obj, name)
    try:
        if isinstance(current, bool):
            value = _parse_bool(raw)
        elif isinstance(current, int):
            value = int(raw)
        elif isinstance(current, float):
            value = float(raw)
        elif isinstance(current, tuple):
            parser = _parse_int_tuple if all(isinstance(v, int) for v in current) else _parse_float_tuple
            value = parser(raw)
        else:
            value = raw
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {name}: {raw!r}") from exc
    setattr(obj, name, value)


_SECTION_TARGETS = {
    "data": lambda cfg: cfg.scene,
    "model": lambda cfg: cfg,  # handled per key below
    "align": lambda cfg: cfg.train.align,
    "train": lambda cfg: cfg.train,
    "eval": lambda cfg: cfg,
    "paths": lambda cfg: cfg,
}

_MODEL_KEYS = {
    "variant": "variant",
    "kind": "model_kind",
    "baseline_modality": "baseline_modality",
    "translate_first_kernel": "translate_first_kernel",
    "lateral_width": "lateral_width",
}

_EVAL_KEYS = {"mode": "eval_mode", "branch": "eval_branch"}
_PATH_KEYS = {"data_dir": "data_dir", "out_dir": "out_dir"}


def load_run_config(path: Optional[str] = None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config file {path}: {exc}") from exc
    for section in parser.sections():
        if section not in _SECTION_TARGETS:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            _apply_key(cfg, section, key, raw)
    return cfg


def _apply_key(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    if section == "model":
        if key == "variant":
            cfg.encoder = EncoderConfig.from_name(
                raw, cfg.encoder.in_channels_m1, cfg.encoder.in_channels_m2
            )
            return
        if key == "lateral_width":
            cfg.lateral_width = int(raw)
            return
        if key not in _MODEL_KEYS:
            raise ConfigurationError(f"unknown key {key!r} in [model]")
        _set_typed(cfg, _MODEL_KEYS[key], raw)
        return
    if section == "eval":
        if key not in _EVAL_KEYS:
            raise ConfigurationError(f"unknown key {key!r} in [eval]")
        setattr(cfg, _EVAL_KEYS[key], raw)
        return
    if section == "paths":
        if key not in _PATH_KEYS:
            raise ConfigurationError(f"unknown key {key!r} in [paths]")
        setattr(cfg, _PATH_KEYS[key], raw)
        return
    target = _SECTION_TARGETS[section](cfg)
    if not any(f.name == key for f in fields(target)):
        raise ConfigurationError(f"unknown key {key!r} in [{section}]")
    _set_typed(target, key, raw)
    if section == "data":
        # keep the encoder's input widths in lockstep with the data shape
        cfg.encoder.in_channels_m1 = cfg.scene.modality1_channels
        cfg.encoder.in_channels_m2 = cfg.scene.modality2_channels
