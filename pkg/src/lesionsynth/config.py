"""Schema-validated run configuration.

One YAML file drives every pipeline stage.  Unknown keys are rejected by
name so a typo can never silently fall back to a default.  Stage defaults
carry the reference hyperparameters: mask-GAN Adam at 2e-4 (G) and 1e-4 (D)
with batch 64; diffusion AdamW at 1e-4 with an effective batch of 128 via
gradient accumulation over 200 epochs; downstream Adam at 1e-5 with batch 24.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, is_dataclass, asdict
from pathlib import Path

import yaml


class ConfigInvalid(Exception):
    pass


class UnknownCommand(Exception):
    pass


@dataclass
class DataSection:
    phantom_count: int = 2000
    phantom_dir: str = ""
    texture_variant: str = "standard"


@dataclass
class VAESection:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    kl_weight: float = 1e-4
    latent_channels: int = 4
    base_channels: int = 32


@dataclass
class SCMGSection:
    epochs: int = 30
    batch_size: int = 64
    lr_g: float = 2e-4
    lr_d: float = 1e-4
    z_dim: int = 128
    enable_curvature: bool = True
    cls_target: str = "real"


@dataclass
class DiffusionSection:
    timesteps: int = 200
    epochs: int = 200
    batch_size: int = 32
    accum_steps: int = 4
    lr: float = 1e-4
    lock_base: bool = False
    vae_checkpoint: str = ""


@dataclass
class EvalSection:
    extractor: str = "handcrafted"


@dataclass
class DownstreamSection:
    task: str = "classification"
    ratios: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 1.0, 2.0])
    include_ordinary: bool = True
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 20
    lr: float = 1e-5
    batch_size: int = 24
    synthetic_dir: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    resolution: int = 64
    out_root: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    vae: VAESection = field(default_factory=VAESection)
    scmg: SCMGSection = field(default_factory=SCMGSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    eval: EvalSection = field(default_factory=EvalSection)
    downstream: DownstreamSection = field(default_factory=DownstreamSection)

    def to_dict(self) -> dict:
        return asdict(self)


def _apply(obj, data: dict, path: str) -> None:
    valid = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in valid:
            raise ConfigInvalid(f"unknown config key: {where!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigInvalid(f"{where!r} must be a mapping")
            _apply(current, value, where)
            continue
        expected = type(current)
        if expected is float and isinstance(value, int):
            value = float(value)
        if expected is list:
            if not isinstance(value, list):
                raise ConfigInvalid(f"{where!r} must be a list")
        elif expected is bool:
            if not isinstance(value, bool):
                raise ConfigInvalid(f"{where!r} must be a boolean")
        elif not isinstance(value, expected):
            raise ConfigInvalid(
                f"{where!r} must be {expected.__name__}, got {type(value).__name__}"
            )
        setattr(obj, key, value)


def load_config(path) -> RunConfig:
    """Parse and validate a YAML config file; unknown keys raise ConfigInvalid."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigInvalid(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"config is not valid YAML: {exc}")
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigInvalid("top-level config must be a mapping")
    config = RunConfig()
    _apply(config, raw, "")
    return config


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
