"""Run configuration: one flat TOML file of scalars.

Unknown keys are rejected so typos fail loudly, values are range-checked
up front, and any key can be overridden on the command line with
``--set key=value``.  The configuration hashes to a short digest that
run manifests record for reproducibility.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .wavelet import supported_bases

DEVICE_ENV = "CRACKSEQ_DEVICE"


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class RunConfig:
    # dataset
    train_annotations: str = ""
    val_annotations: str = ""
    image_root: str = ""
    # input windows
    t_window: int = 5
    input_size: int = 64
    # optimization
    epochs: int = 5
    batch_size: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0
    max_steps: int = 0          # 0 means no cap
    float64: bool = False
    seed: int = 0
    # loss
    reg_weight: float = 5.0
    cls_weight: float = 1.0
    obj_weight: float = 1.0
    iou_weight: float = 0.5
    nwd_weight: float = 0.5
    nwd_constant: float = 12.8
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # model
    stride: int = 16
    channels: int = 64
    wavelet_levels: int = 2
    wavelet_basis: str = "haar"
    wavelet_kernel: int = 3
    window_size: int = 4
    heads: int = 4
    refine_blocks: int = 2
    assign_radius: float = 1.5
    # inference / evaluation
    score_threshold: float = 0.001
    nms_iou: float = 0.65
    match_iou: float = 0.5

    def validate(self) -> "RunConfig":
        positive = [
            "t_window", "input_size", "epochs", "batch_size", "channels",
            "stride", "wavelet_levels", "wavelet_kernel", "window_size",
            "heads", "refine_blocks", "nwd_constant", "assign_radius",
        ]
        nonnegative = [
            "learning_rate", "momentum", "weight_decay", "max_steps", "seed",
            "reg_weight", "cls_weight", "obj_weight", "iou_weight",
            "nwd_weight", "focal_gamma", "score_threshold",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got "
                                  f"{getattr(self, name)}")
        for name in nonnegative:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got "
                                  f"{getattr(self, name)}")
        for name in ("focal_alpha",):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got "
                                  f"{getattr(self, name)}")
        for name in ("nms_iou", "match_iou"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1], got "
                                  f"{getattr(self, name)}")
        if self.input_size % self.stride:
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by stride "
                f"{self.stride}"
            )
        if self.wavelet_basis not in supported_bases():
            raise ConfigError(
                f"wavelet_basis must be one of {supported_bases()}, got "
                f"'{self.wavelet_basis}'"
            )
        if self.wavelet_kernel % 2 != 1:
            raise ConfigError(
                f"wavelet_kernel must be odd, got {self.wavelet_kernel}"
            )
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def model_kwargs(self) -> dict:
        return {
            "channels": self.channels,
            "stride": self.stride,
            "t_window": self.t_window,
            "wavelet_levels": self.wavelet_levels,
            "wavelet_basis": self.wavelet_basis,
            "wavelet_kernel": self.wavelet_kernel,
            "window_size": self.window_size,
            "heads": self.heads,
            "refine_blocks": self.refine_blocks,
        }


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value) -> object:
    kind = _FIELDS[name].type
    if isinstance(value, dict):
        raise ConfigError(f"'{name}' must be a scalar (configs are flat)")
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"'{name}' must be a boolean, got {value!r}")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{name}' must be an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{name}' must be a number, got {value!r}")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"'{name}' must be a string, got {value!r}")
        return value
    raise ConfigError(f"unhandled field type for '{name}'")


def _build(values: dict) -> RunConfig:
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    coerced = {k: _coerce(k, v) for k, v in values.items()}
    return RunConfig(**coerced).validate()


def parse_overrides(pairs: list[str]) -> dict:
    """Parse --set key=value pairs; values use TOML literal syntax, with
    a bare-string fallback for convenience."""
    out = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override '{pair}' is not of the form "
                              f"key=value")
        key = key.strip()
        raw = raw.strip()
        try:
            out[key] = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            out[key] = raw
    return out


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read a flat TOML file (optional) and apply overrides."""
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            values = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if overrides:
        values.update(parse_overrides(overrides))
    return _build(values)


def config_hash(config: RunConfig) -> str:
    payload = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def resolve_device() -> str:
    return os.environ.get(DEVICE_ENV, "cpu")
