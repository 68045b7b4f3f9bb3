"""JSON run configuration mapped onto the parameter dataclasses."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .cloud import CameraIntrinsics
from .errors import ConfigError
from .pipeline import AlignParams, ReconstructionParams, TrackingParams
from .registration import IcpParams
from .se3 import RigidTransform, from_pose_text
from .simulate import DEFAULT_INTRINSICS, NoiseModel


@dataclass(frozen=True)
class Config:
    reconstruction: ReconstructionParams = ReconstructionParams()
    tracking: TrackingParams = TrackingParams()
    align: AlignParams = AlignParams()
    noise: NoiseModel = field(default_factory=NoiseModel.l515)
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    t_manual: str | None = None  # "tx ty tz qx qy qz qw", world -> model
    p_u_ref: str | None = None  # desired world_from_model
    seed: int = 0

    def manual_alignment(self) -> RigidTransform | None:
        return None if self.t_manual is None else from_pose_text(self.t_manual)

    def reference_pose(self) -> RigidTransform | None:
        return None if self.p_u_ref is None else from_pose_text(self.p_u_ref)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {where + '.' if where else ''}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, key)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict) -> Config:
    cfg = _build(Config, data, "")
    for name in ("t_manual", "p_u_ref"):
        text = getattr(cfg, name)
        if text is not None:
            try:
                from_pose_text(text)
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from exc
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def config_to_dict(cfg: Config) -> dict:
    return dataclasses.asdict(cfg)


def with_xtion_profile(cfg: Config) -> Config:
    """Switch tracking voxel and neighborhood sizes to the coarser-sensor profile."""
    return dataclasses.replace(cfg, tracking=dataclasses.replace(cfg.tracking, d_star=0.02, d_nei=0.10))


__all__ = ["Config", "IcpParams", "config_from_dict", "config_to_dict", "load_config", "with_xtion_profile"]
