"""Run configuration: JSON schema, strict parsing, desk-scale defaults.

A run is a pure function of (RunConfig, code version): every randomized
step derives its generator from the config seed, so identical configs
reproduce identical artifacts. Unknown config keys are rejected to catch
typos before they silently change an experiment.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(Exception):
    """Raised for malformed or inconsistent run configurations."""


# Table-style detector variants: encoder + aggregation + loss
VARIANT_NAMES = ("C+SA+B", "CL+SA+B", "CL+MSA+B", "CL+Mean+B", "CL+Max+B", "CL+Max+F")

VARIANT_OVERRIDES = {
    "C+SA+B": {"instance_encoder": "conv_only", "aggregation": "self_attention",
               "attention_heads": 1, "loss": "bce"},
    "CL+SA+B": {"instance_encoder": "convlstm", "aggregation": "self_attention",
                "attention_heads": 1, "loss": "bce"},
    "CL+MSA+B": {"instance_encoder": "convlstm", "aggregation": "self_attention",
                 "attention_heads": 4, "loss": "bce"},
    "CL+Mean+B": {"instance_encoder": "convlstm", "aggregation": "mean", "loss": "bce"},
    "CL+Max+B": {"instance_encoder": "convlstm", "aggregation": "max", "loss": "bce"},
    "CL+Max+F": {"instance_encoder": "convlstm", "aggregation": "max", "loss": "focal"},
}


@dataclass
class DataConfig:
    root: str = "data"
    dims: tuple = (64, 64, 64)
    slice_spacing_mm: float = 2.0
    vessel_count: int = 7
    emboli_per_positive: int = 2
    noise_sigma: float = 20.0
    contrast_delta: float = 160.0
    counts: dict = field(default_factory=lambda: {
        "train": [7, 5], "val": [8, 8], "test": [8, 6]
    })


@dataclass
class PreprocessConfig:
    target_spacing_mm: float = 2.0
    window: tuple = (-1000.0, 400.0)
    crop: int = 48
    resize: int = 32
    instances: int = 16  # T, the bag length
    overlap: int = 4
    mask_threshold: float | None = None


@dataclass
class Stage1Config:
    depth: int = 4
    base_channels: int = 8
    negatives_per_positive: float = 1.0
    epochs: int = 24
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.01
    patience: int = 3
    decay_factor: float = 0.1
    min_lr: float = 1e-6


@dataclass
class Stage2Config:
    hidden: int = 64
    pool: int = 8
    aggregation: str = "max"
    attention_heads: int = 4
    attention_dim: int = 128
    loss: str = "focal"
    focal_gamma: float = 2.0
    instance_encoder: str = "convlstm"
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    patience: int = 3
    decay_factor: float = 0.1
    min_lr: float = 1e-6
    stage1_checkpoint: str | None = None


@dataclass
class EvalConfig:
    split: str = "test"
    threshold: float = 0.5
    stage1_checkpoint: str | None = None
    stage2_checkpoint: str | None = None


@dataclass
class AblationConfig:
    epochs: int = 8
    variants: tuple = VARIANT_NAMES
    t_sweep: tuple = (4, 8, 12, 16)


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)


_SECTIONS = {
    "data": DataConfig,
    "preprocess": PreprocessConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "eval": EvalConfig,
    "ablation": AblationConfig,
}


def _build_section(cls, payload: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if isinstance(value, list) and key not in ("counts",):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(payload: dict) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be an object, got {type(payload).__name__}")
    top_allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(payload) - top_allowed
    if unknown:
        raise ConfigError(f"unknown top-level config key(s): {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            kwargs[key] = _build_section(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    cfg = RunConfig(**kwargs)
    validate_config(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(payload)


def validate_config(cfg: RunConfig) -> None:
    p = cfg.preprocess
    s1, s2 = cfg.stage1, cfg.stage2
    d, h, w = cfg.data.dims
    if len(cfg.data.dims) != 3:
        raise ConfigError(f"data.dims must have 3 entries, got {cfg.data.dims}")
    if p.window[0] >= p.window[1]:
        raise ConfigError(f"preprocess.window must be (low, high) with low < high, got {p.window}")
    if p.instances < 1:
        raise ConfigError(f"preprocess.instances must be >= 1, got {p.instances}")
    if not 0 <= p.overlap < p.instances:
        raise ConfigError(
            f"preprocess.overlap must satisfy 0 <= overlap < instances, got {p.overlap} vs {p.instances}"
        )
    if p.crop > h or p.crop > w:
        raise ConfigError(f"preprocess.crop {p.crop} exceeds volume cross-section {h}x{w}")
    if p.resize % s2.pool:
        raise ConfigError(
            f"preprocess.resize {p.resize} must be divisible by stage2.pool {s2.pool}"
        )
    factor = 2**s1.depth
    if h % factor or w % factor:
        raise ConfigError(
            f"volume cross-section {h}x{w} must be divisible by 2**stage1.depth = {factor}"
        )
    if s2.aggregation not in ("mean", "max", "self_attention"):
        raise ConfigError(f"stage2.aggregation must be mean|max|self_attention, got {s2.aggregation!r}")
    if s2.instance_encoder not in ("convlstm", "conv_only"):
        raise ConfigError(f"stage2.instance_encoder must be convlstm|conv_only, got {s2.instance_encoder!r}")
    if s2.loss not in ("bce", "focal"):
        raise ConfigError(f"stage2.loss must be bce|focal, got {s2.loss!r}")
    if s2.focal_gamma < 0:
        raise ConfigError(f"stage2.focal_gamma must be >= 0, got {s2.focal_gamma}")
    if cfg.eval.split not in ("train", "val", "test"):
        raise ConfigError(f"eval.split must be train|val|test, got {cfg.eval.split!r}")
    for name in cfg.ablation.variants:
        if name not in VARIANT_OVERRIDES:
            raise ConfigError(f"unknown ablation variant {name!r}, expected one of {VARIANT_NAMES}")


def config_to_dict(cfg: RunConfig) -> dict:
    def convert(value):
        if dataclasses.is_dataclass(value):
            return {k: convert(v) for k, v in dataclasses.asdict(value).items()}
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        return value

    return {f.name: convert(getattr(cfg, f.name)) for f in dataclasses.fields(RunConfig)}


def write_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def variant_stage2(base: Stage2Config, variant: str, epochs: int | None = None) -> Stage2Config:
    """Stage2 config for a named ablation variant; only the studied axis changes."""
    overrides = dict(VARIANT_OVERRIDES[variant])
    if epochs is not None:
        overrides["epochs"] = epochs
    return dataclasses.replace(base, **overrides)
