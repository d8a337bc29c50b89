"""Run configuration.

A config file is a JSON object; every field has a default taken from the
reference radio setup, so ``{}`` is a valid config. Unknown keys are
rejected. Tracing parameters start from a named preset and may override
individual fields::

    {"altitudes": [100], "duration": 1.0, "trace": {"preset": "fast", "l_max": 10}}
"""

import json
from dataclasses import asdict, replace
from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from mmwave_uav_sim import canonical
from mmwave_uav_sim.channel import AntennaPair, ArrayDescriptor
from mmwave_uav_sim.electromagnetics import (
    DEFAULT_SCATTERING,
    ISOTROPIC,
    VERTICAL_DIPOLE,
    AntennaPattern,
)
from mmwave_uav_sim.errors import ConfigError
from mmwave_uav_sim.raytracer import TRACE_PRESETS, TraceConfig

AntennaName = Literal["half_wave_dipole", "isotropic"]

_ANTENNAS: dict[str, AntennaPattern] = {
    "half_wave_dipole": VERTICAL_DIPOLE,
    "isotropic": ISOTROPIC,
}


class TraceSettings(BaseModel):
    """Preset name plus optional per-field overrides of :class:`TraceConfig`."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    preset: Literal["reference", "fast", "oracle"] = "reference"
    ray_spacing_deg: Optional[float] = Field(default=None, gt=0)
    max_reflections: Optional[int] = Field(default=None, ge=0)
    l_max: Optional[int] = Field(default=None, ge=1)
    ds_max_interactions: Optional[int] = Field(default=None, ge=1)
    tile_area: Optional[float] = Field(default=None, gt=0)
    exhaustive_face_limit: Optional[int] = Field(default=None, ge=0)
    reception_factor: Optional[float] = Field(default=None, gt=0)
    diffuse_path_limit: Optional[int] = Field(default=None, ge=0)
    scatter_tile_pool: Optional[int] = Field(default=None, ge=0)
    rx_offset: Optional[float] = Field(default=None, gt=0)
    diffraction: Optional[bool] = None
    diffuse: Optional[bool] = None

    def resolve(self, frequency: float, tx_power: float) -> TraceConfig:
        overrides = {
            name: value
            for name, value in self.model_dump(exclude={"preset"}).items()
            if value is not None
        }
        return replace(TRACE_PRESETS[self.preset], f=frequency, tx_power=tx_power, **overrides)


class ArraySettings(BaseModel):
    """Element positions (in wavelengths) used for offline MIMO synthesis."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    tx: list[tuple[float, float, float]] = [(0.0, 0.0, 0.0)]
    rx: list[tuple[float, float, float]] = [(0.0, 0.0, 0.0)]

    @field_validator("tx", "rx")
    @classmethod
    def _non_empty(cls, value: list) -> list:
        if not value:
            raise ValueError("array needs at least one element")
        return value

    def descriptors(self) -> tuple[ArrayDescriptor, ArrayDescriptor]:
        return ArrayDescriptor(self.tx), ArrayDescriptor(self.rx)  # type: ignore[arg-type]


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    frequency: float = Field(default=60e9, gt=0)  # Hz
    tx_power: float = 0.0  # dBm
    tx_position: Optional[tuple[float, float, float]] = None  # defaults to the scene's transmitter
    tx_antenna: AntennaName = "half_wave_dipole"
    rx_antenna: AntennaName = "half_wave_dipole"
    altitudes: list[float] = Field(default_factory=lambda: [50.0, 100.0, 150.0], min_length=1)
    t_sam: float = Field(default=0.1, gt=0)  # s
    duration: float = Field(default=5.0, ge=0)  # s
    trace: TraceSettings = TraceSettings()
    scattering: dict[str, float] = Field(default_factory=lambda: dict(DEFAULT_SCATTERING))
    arrays: ArraySettings = ArraySettings()
    seed: int = Field(default=42, ge=0)
    scene_path: Optional[Path] = None
    routes_path: Optional[Path] = None
    output_dir: Optional[Path] = None

    @field_validator("altitudes")
    @classmethod
    def _positive_altitudes(cls, value: list[float]) -> list[float]:
        if any(not a > 0 for a in value):
            raise ValueError("altitudes must be positive")
        if len(set(value)) != len(value):
            raise ValueError("altitudes must be distinct")
        return value

    @field_validator("scattering")
    @classmethod
    def _scattering_range(cls, value: dict[str, float]) -> dict[str, float]:
        for name, s in value.items():
            if not 0.0 <= s < 1.0:
                raise ValueError(f"scattering coefficient for '{name}' must be in [0, 1)")
        return value

    def trace_config(self) -> TraceConfig:
        return self.trace.resolve(self.frequency, self.tx_power)

    def antennas(self) -> AntennaPair:
        return AntennaPair(tx=_ANTENNAS[self.tx_antenna], rx=_ANTENNAS[self.rx_antenna])

    def snapshot(self, tx_position: Optional[tuple[float, float, float]] = None, **extra: Any) -> dict:
        """Resolved, path-free view of the run used for hashing and episode records."""
        data = self.model_dump(mode="json", exclude={"scene_path", "routes_path", "output_dir", "trace"})
        data["trace"] = asdict(self.trace_config())
        data["tx_position"] = list(tx_position) if tx_position is not None else data["tx_position"]
        data.update(extra)
        return data


def config_hash(snapshot: dict) -> str:
    """SHA-256 of the canonical JSON form of a config snapshot."""
    return canonical.sha256_text(canonical.dumps(snapshot))


def _format_errors(e: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
    )


def build_config(data: Any, base_dir: Optional[Path] = None) -> RunConfig:
    """Validate a decoded config object; relative paths resolve against ``base_dir``."""
    if not isinstance(data, dict):
        raise ConfigError("Config must be a JSON object")
    try:
        cfg = RunConfig.model_validate(data)
        cfg.trace_config()
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {_format_errors(e)}") from e

    updates: dict[str, Path] = {}
    for name in ("scene_path", "routes_path", "output_dir"):
        value = getattr(cfg, name)
        if value is not None and base_dir is not None and not value.is_absolute():
            updates[name] = base_dir / value
    if updates:
        cfg = cfg.model_copy(update=updates)

    for name in ("scene_path", "routes_path"):
        value = getattr(cfg, name)
        if value is not None and not value.is_file():
            raise ConfigError(f"{name}: file not found: {value}")
    if (cfg.scene_path is None) != (cfg.routes_path is None):
        raise ConfigError("scene_path and routes_path must be given together")
    return cfg


def parse_config(path: Union[str, Path]) -> RunConfig:
    """Load and validate a JSON run config.

    Raises:
        ConfigError: missing file, invalid JSON or a schema violation (the
            message names each offending field).
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return build_config(data, base_dir=path.parent)
