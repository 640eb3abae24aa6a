"""Simulation config files: YAML text validated against a strict schema.

Unknown keys are rejected, and every error names the offending field together
with its line in the source file.
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .domain import MAGIC_ANGLE, NVSensor, SpinBathParams

__all__ = [
    "ConfigError",
    "Grid",
    "SensorConfig",
    "BathConfig",
    "MonteCarloConfig",
    "CurveExperiment",
    "SweepExperiment",
    "DipExperiment",
    "SimulationConfig",
    "load_config",
    "parse_config",
    "canonical_json",
    "config_hash",
]


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Grid(_Strict):
    """Evenly spaced grid; ``spacing: log`` spaces points geometrically."""

    start: float
    stop: float
    num: int = Field(ge=1)
    spacing: Literal["linear", "log"] = "linear"

    @model_validator(mode="after")
    def _check(self):
        if self.stop < self.start:
            raise ValueError("stop must be >= start")
        if self.spacing == "log" and self.start <= 0:
            raise ValueError("log spacing needs start > 0")
        return self

    def values(self) -> np.ndarray:
        if self.spacing == "log":
            return np.geomspace(self.start, self.stop, self.num)
        return np.linspace(self.start, self.stop, self.num)


GridLike = Union[Grid, List[float]]


def grid_values(g: GridLike) -> np.ndarray:
    return g.values() if isinstance(g, Grid) else np.asarray(g, dtype=float)


class SensorConfig(_Strict):
    depth_nm: float = Field(10.0, gt=0)
    axis_polar_angle_deg: float = Field(math.degrees(MAGIC_ANGLE), ge=0, le=90)
    bias_field_gauss: float = Field(382.0, ge=0)

    def build(self) -> NVSensor:
        return NVSensor(self.depth_nm, math.radians(self.axis_polar_angle_deg), self.bias_field_gauss)


class BathConfig(_Strict):
    """Bath strength from exactly one of density, field or coupling strength."""

    tau_c_us: float = Field(gt=0)
    sigma_nm2: Optional[float] = Field(None, ge=0)
    b_rms_T: Optional[float] = Field(None, ge=0)
    coupling_khz: Optional[float] = Field(None, ge=0)

    @model_validator(mode="after")
    def _one_strength(self):
        given = [k for k in ("sigma_nm2", "b_rms_T", "coupling_khz") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError(f"give exactly one of sigma_nm2, b_rms_T, coupling_khz (got {given or 'none'})")
        return self


class MonteCarloConfig(_Strict):
    n_trials: int = Field(10_000, ge=1)
    disk_radius_factor: float = Field(100.0, ge=10)
    fixed_count: bool = False


_CURVE_FAMILIES = ("Ramsey", "Hahn", "CPMG", "DEER", "DEER-echo")


class CurveExperiment(_Strict):
    kind: Literal["curve"]
    name: str
    family: str
    times_us: GridLike
    n_pulses: Optional[Union[int, List[int]]] = None
    tau_offset_us: Optional[float] = Field(None, ge=0)
    tau_fraction: Optional[float] = Field(None, ge=0, le=0.5)
    noise_std: float = Field(0.0, ge=0)

    @field_validator("family")
    @classmethod
    def _family(cls, v):
        if v not in _CURVE_FAMILIES:
            raise ValueError(f"family must be one of {_CURVE_FAMILIES}")
        return v

    @model_validator(mode="after")
    def _pulses(self):
        if self.family == "CPMG" and self.n_pulses is None:
            raise ValueError("CPMG needs n_pulses")
        if self.family != "CPMG" and self.n_pulses is not None:
            raise ValueError("n_pulses applies only to CPMG")
        if self.family != "DEER-echo" and (self.tau_offset_us is not None or self.tau_fraction is not None):
            raise ValueError("tau_offset_us / tau_fraction apply only to DEER-echo")
        return self

    def pulse_counts(self) -> list:
        if self.n_pulses is None:
            return [None]
        return [self.n_pulses] if isinstance(self.n_pulses, int) else list(self.n_pulses)


class SweepExperiment(_Strict):
    """DEER-echo coherence versus bath-flip offset at one echo time."""

    kind: Literal["tau_sweep"]
    name: str
    total_time_us: float = Field(gt=0)
    taus_us: GridLike
    noise_std: float = Field(0.0, ge=0)


class DipExperiment(_Strict):
    """DEER spectrum over a drive-frequency sweep."""

    kind: Literal["dip"]
    name: str
    freqs_mhz: GridLike
    rabi_mhz: float = Field(gt=0)
    total_time_us: float = Field(gt=0)
    contrast_scale: float = Field(1.0, gt=0)
    g_ratio: float = Field(1.0, gt=0)
    noise_std: float = Field(0.0, ge=0)


Experiment = Annotated[Union[CurveExperiment, SweepExperiment, DipExperiment], Field(discriminator="kind")]


class SimulationConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    engine: Literal["analytic", "montecarlo"] = "analytic"
    sensor: SensorConfig = SensorConfig()
    baths: Dict[str, BathConfig]
    montecarlo: MonteCarloConfig = MonteCarloConfig()
    experiments: List[Experiment] = Field(min_length=1)

    @model_validator(mode="after")
    def _names(self):
        names = [e.name for e in self.experiments]
        if len(set(names)) != len(names):
            raise ValueError("experiment names must be unique")
        if not self.baths:
            raise ValueError("at least one bath is required")
        if self.engine == "montecarlo":
            bad = [k for k, b in self.baths.items() if b.sigma_nm2 is None]
            if bad:
                raise ValueError(f"the montecarlo engine needs sigma_nm2 for baths {bad}")
        return self

    def with_overrides(self, seed=None, engine=None, trials=None) -> "SimulationConfig":
        data = self.model_dump()
        if seed is not None:
            data["seed"] = seed
        if engine is not None:
            data["engine"] = engine
        if trials is not None:
            data["montecarlo"]["n_trials"] = trials
        return _validate(data, None)


def bath_params(cfg: BathConfig, sensor: NVSensor) -> SpinBathParams:
    """Resolve a bath entry to :class:`SpinBathParams` with ``b_rms`` filled in."""
    from .decoherence import OUNoise

    if cfg.sigma_nm2 is not None:
        return SpinBathParams(cfg.sigma_nm2, cfg.tau_c_us).resolved(sensor)
    if cfg.b_rms_T is not None:
        return SpinBathParams(0.0, cfg.tau_c_us, b_rms=cfg.b_rms_T)
    noise = OUNoise.from_coupling(cfg.coupling_khz * 1e-3, cfg.tau_c_us)
    return SpinBathParams(0.0, cfg.tau_c_us, b_rms=noise.b_rms)


def _line_of(root, loc) -> Optional[int]:
    node = root
    line = None if node is None else node.start_mark.line + 1
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == str(key)), None)
            if nxt is None:
                # unknown key: point at the key itself
                nxt = next((k for k, _ in node.value if k.value == str(key)), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
        line = node.start_mark.line + 1
    return line


_TAGS = ("curve", "tau_sweep", "dip", "Grid", "int", "float")


def _validate(data, root, source: str = "<config>") -> SimulationConfig:
    try:
        return SimulationConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            # drop discriminator tags pydantic inserts into the location
            loc = [p for p in err["loc"] if not (isinstance(p, str) and (p in _TAGS or "[" in p))]
            where = ".".join(str(p) for p in loc) or "<root>"
            line = _line_of(root, loc)
            at = f"{source}:{line}: " if line else f"{source}: "
            lines.append(f"{at}{where}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None


def parse_config(text: str, source: str = "<config>") -> SimulationConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ConfigError(f"{where}: {getattr(exc, 'problem', None) or exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return _validate(data, root, source)


def load_config(path) -> SimulationConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def config_hash(obj) -> str:
    """sha256 of the canonical JSON form of ``obj`` (a model or plain data)."""
    if isinstance(obj, BaseModel):
        obj = obj.model_dump(mode="json")
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()
