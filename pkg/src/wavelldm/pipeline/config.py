"""Training configuration: a flat YAML document plus command-line overrides.

Every field of :class:`TrainConfig` is a top-level key of the file, e.g.::

    stage: codec
    steps: 2000
    batch_size: 2
    segment: 16384
    lr: 1.0e-3

Stage defaults follow the published two-stage recipe; a file only needs the
keys it changes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

STAGES = ("codec", "diffusion")


@dataclass
class TrainConfig:
    stage: str = "codec"
    steps: int = 250_000
    batch_size: int = 16
    segment: int = 32_768
    lr: float = 2e-4
    beta1: float = 0.8
    beta2: float = 0.99
    weight_decay: float = 0.0
    lr_gamma: float = 0.998
    lr_interval: int = 2000
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000
    data: str = "toy"
    out_dir: str = "runs/codec"
    # stage 2 only
    codec_checkpoint: str = ""
    timesteps: int = 1000
    c_base: int = 64
    time_dim: int = 64
    mask_ms: float = 250.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        for name in ("steps", "batch_size", "segment", "lr_interval", "log_every", "checkpoint_every",
                     "timesteps", "c_base", "time_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "lr_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.mask_ms < 0:
            raise ValueError("weight_decay and mask_ms must be non-negative")

    def to_yaml(self) -> str:
        return yaml.safe_dump(dataclasses.asdict(self), sort_keys=False)


STAGE_DEFAULTS = {
    "codec": {},
    "diffusion": dict(
        batch_size=36, segment=229_376, beta1=0.9, beta2=0.999, weight_decay=1e-2,
        lr_interval=2500, out_dir="runs/diffusion",
    ),
}


def field_types() -> dict[str, type]:
    return {f.name: type(f.default) for f in fields(TrainConfig)}


def _coerce(name: str, value):
    kind = field_types()[name]
    if kind is int and isinstance(value, float) and value.is_integer():
        value = int(value)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is str and value is None:
        value = ""
    if not isinstance(value, kind) or isinstance(value, bool):
        raise ValueError(f"config key {name!r} expects {kind.__name__}, got {value!r}")
    return value


def make_config(stage: str, values: dict | None = None) -> TrainConfig:
    """Stage defaults, then ``values`` on top; unknown keys are an error."""
    values = dict(values or {})
    stage = values.pop("stage", stage)
    known = field_types()
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
    merged = {**STAGE_DEFAULTS.get(stage, {}), **{k: _coerce(k, v) for k, v in values.items()}}
    return TrainConfig(stage=stage, **merged)


def load_config(path, stage: str, overrides: dict | None = None) -> TrainConfig:
    values = {}
    if path:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a mapping of key: value lines")
        values.update(doc)
    if values.get("stage", stage) != stage:
        raise ValueError(f"{path}: file is for stage {values['stage']!r}, command trains {stage!r}")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return make_config(stage, values)


def parse_config_text(text: str) -> TrainConfig:
    doc = yaml.safe_load(text)
    return make_config(doc.get("stage", "codec"), doc)
