"""Physical constants, value types and the density-to-field map.

Internal units are fixed throughout the package:

=========  ==========================
time       microseconds (us)
frequency  rad/us (angular) or MHz
field      tesla (gauss only for the bias field)
density    spins per nm^2
length     nm
=========  ==========================
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Mapping, Optional

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .sequences import SequenceSpec

__all__ = [
    "DomainError",
    "MAGIC_ANGLE",
    "PhysicalConstants",
    "CONSTANTS",
    "NVSensor",
    "SpinBathParams",
    "PulseSequence",
    "CoherenceCurve",
    "TauSweep",
    "NoiseSpectrum",
    "FitResult",
    "brms_from_density",
    "dipolar_prefactor",
    "angular_factor",
]

#: angle between a <111> NV axis and the <100> surface normal, arccos(1/sqrt(3))
MAGIC_ANGLE = math.acos(1.0 / math.sqrt(3.0))


class DomainError(ValueError):
    """Raised when a value violates a physical or structural invariant."""


def _frozen_array(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    if arr.ndim != 1:
        raise DomainError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PhysicalConstants:
    gamma_e: float = 2.8024953e10  # Hz / T
    mu0_over_4pi: float = 1e-7  # T m / A
    hbar: float = 1.054571817e-34  # J s

    def __post_init__(self):
        for name in ("gamma_e", "mu0_over_4pi", "hbar"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise DomainError(f"{name} must be strictly positive, got {value!r}")

    @property
    def gamma_angular(self) -> float:
        """Electron gyromagnetic ratio in rad/us per tesla."""
        return 2.0 * math.pi * self.gamma_e * 1e-6

    @property
    def gamma_mhz_per_gauss(self) -> float:
        return self.gamma_e * 1e-4 * 1e-6


CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class NVSensor:
    """Shallow NV sensor treated as an effective two-level system.

    Parameters
    ----------
    depth : float
        Distance below the surface spin plane, in nm.
    axis_polar_angle : float
        Angle between the NV axis and the surface normal, in radians.
    bias_field : float
        Static bias field in gauss.
    """

    depth: float = 10.0
    axis_polar_angle: float = MAGIC_ANGLE
    bias_field: float = 382.0

    def __post_init__(self):
        if not (self.depth > 0 and math.isfinite(self.depth)):
            raise DomainError(f"sensor depth must be > 0 nm, got {self.depth!r}")
        if not (0.0 <= self.axis_polar_angle <= math.pi / 2 + 1e-15):
            raise DomainError(
                f"axis_polar_angle must lie in [0, pi/2], got {self.axis_polar_angle!r}"
            )
        if not self.bias_field >= 0:
            raise DomainError(f"bias_field must be >= 0 G, got {self.bias_field!r}")

    @property
    def axis(self) -> np.ndarray:
        a = self.axis_polar_angle
        return np.array([math.sin(a), 0.0, math.cos(a)])


@dataclass(frozen=True)
class SpinBathParams:
    """Surface electron bath: density (nm^-2), correlation time (us), optional B_rms (T)."""

    sigma: float
    tau_c: float
    b_rms: Optional[float] = None

    def __post_init__(self):
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise DomainError(f"sigma must be >= 0 nm^-2, got {self.sigma!r}")
        if not self.tau_c > 0:
            raise DomainError(f"tau_c must be > 0 us, got {self.tau_c!r}")
        if self.b_rms is not None and not (self.b_rms >= 0 and math.isfinite(self.b_rms)):
            raise DomainError(f"b_rms must be >= 0 T, got {self.b_rms!r}")

    def resolved(self, sensor: NVSensor, constants: PhysicalConstants = CONSTANTS) -> "SpinBathParams":
        """Return a copy with ``b_rms`` filled in from the density and geometry."""
        if self.b_rms is not None:
            return self
        return replace(self, b_rms=brms_from_density(self, sensor, constants))


def dipolar_prefactor(constants: PhysicalConstants = CONSTANTS) -> float:
    """Electron-electron dipolar constant mu0/4pi * gamma^2 * hbar in rad/us * nm^3."""
    gamma_si = 2.0 * math.pi * constants.gamma_e  # rad / (s T)
    kappa_si = constants.mu0_over_4pi * gamma_si**2 * constants.hbar  # rad m^3 / s
    return kappa_si * 1e27 * 1e-6


def angular_factor(axis_polar_angle: float) -> float:
    """Plane integral of (1 - 3cos^2 theta)^2 / r^6 in units of pi / depth^4."""
    c2 = math.cos(axis_polar_angle) ** 2
    return 9.0 / 32.0 + 3.0 * c2 / 16.0 + 9.0 * c2 * c2 / 32.0


def brms_from_density(
    bath: SpinBathParams,
    sensor: NVSensor,
    constants: PhysicalConstants = CONSTANTS,
) -> float:
    """R.m.s. secular field (tesla) of a spin-1/2 plane of density ``bath.sigma``.

    Each spin contributes ``a_i s_i`` with ``s_i = +-1/2`` to the sensor precession
    rate, so ``(gamma B_rms)^2 = sigma/4 * integral a(r)^2 dA``. The plane integral
    is evaluated in closed form; it scales as ``sqrt(sigma) / depth^2``.
    """
    if not sensor.depth > 0:
        raise DomainError("sensor depth must be positive")
    if bath.sigma == 0:
        return 0.0
    kappa = dipolar_prefactor(constants)
    plane = math.pi * angular_factor(sensor.axis_polar_angle) / sensor.depth**4
    gamma_b_sq = 0.25 * bath.sigma * kappa**2 * plane
    return math.sqrt(gamma_b_sq) / constants.gamma_angular


def _check_increasing(arr: np.ndarray, name: str, strict: bool = True):
    if arr.size > 1:
        diffs = np.diff(arr)
        if strict and not np.all(diffs > 0):
            raise DomainError(f"{name} must be strictly increasing")


@dataclass(frozen=True)
class PulseSequence:
    """Instantaneous pi flips on the sensor and bath channels.

    A bath flip exactly at ``total_time`` is allowed and has no effect on the
    accumulated phase.
    """

    total_time: float
    sensor_flips: tuple = ()
    bath_flips: tuple = ()
    label: str = "custom"

    def __post_init__(self):
        T = self.total_time
        if not (T > 0 and math.isfinite(T)):
            raise DomainError(f"total_time must be > 0 us, got {T!r}")
        sensor = tuple(float(x) for x in self.sensor_flips)
        bath = tuple(float(x) for x in self.bath_flips)
        object.__setattr__(self, "sensor_flips", sensor)
        object.__setattr__(self, "bath_flips", bath)
        _check_increasing(np.asarray(sensor), "sensor_flips")
        _check_increasing(np.asarray(bath), "bath_flips")
        if sensor and not (sensor[0] > 0 and sensor[-1] < T):
            raise DomainError("sensor flips must lie strictly inside (0, total_time)")
        if bath and not (bath[0] > 0 and bath[-1] <= T):
            raise DomainError("bath flips must lie inside (0, total_time]")
        from .sequences import check_label  # local import: sequences depends on domain

        check_label(self)


@dataclass(frozen=True)
class CoherenceCurve:
    times: np.ndarray
    values: np.ndarray
    sequence: "SequenceSpec"
    uncertainty: Optional[np.ndarray] = None
    seed: Optional[int] = None

    def __post_init__(self):
        times = _frozen_array(self.times, "times")
        values = _frozen_array(self.values, "values")
        _check_increasing(times, "times")
        if times.size != values.size:
            raise DomainError("times and values must have equal length")
        if self.uncertainty is not None:
            unc = _frozen_array(self.uncertainty, "uncertainty")
            if unc.size != times.size:
                raise DomainError("uncertainty must match the length of times")
            if np.any(unc < 0):
                raise DomainError("uncertainty entries must be >= 0")
            object.__setattr__(self, "uncertainty", unc)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.times.size


@dataclass(frozen=True)
class TauSweep:
    """DEER-echo coherence versus bath-flip offset at a fixed echo time."""

    taus: np.ndarray
    values: np.ndarray
    total_time: float
    uncertainty: Optional[np.ndarray] = None
    seed: Optional[int] = None

    def __post_init__(self):
        taus = _frozen_array(self.taus, "taus")
        values = _frozen_array(self.values, "values")
        _check_increasing(taus, "taus")
        if taus.size != values.size:
            raise DomainError("taus and values must have equal length")
        if not self.total_time > 0:
            raise DomainError("total_time must be > 0 us")
        if taus.size and (taus[0] < 0 or taus[-1] > self.total_time / 2 * (1 + 1e-12)):
            raise DomainError("tau offsets must lie within [0, total_time/2]")
        if self.uncertainty is not None:
            unc = _frozen_array(self.uncertainty, "uncertainty")
            if unc.size != taus.size:
                raise DomainError("uncertainty must match the length of taus")
            object.__setattr__(self, "uncertainty", unc)
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.taus.size


@dataclass(frozen=True)
class NoiseSpectrum:
    omegas: np.ndarray  # rad/us
    amplitudes: np.ndarray  # rad^2/us
    provenance: str = "model"
    uncertainty: Optional[np.ndarray] = None
    dropped: int = 0

    def __post_init__(self):
        if self.provenance not in ("reconstructed", "model"):
            raise DomainError(f"unknown provenance {self.provenance!r}")
        omegas = _frozen_array(self.omegas, "omegas")
        amps = _frozen_array(self.amplitudes, "amplitudes")
        if omegas.size != amps.size:
            raise DomainError("omegas and amplitudes must have equal length")
        _check_increasing(omegas, "omegas")
        if omegas.size and omegas[0] <= 0:
            raise DomainError("omegas must be positive")
        if self.uncertainty is not None:
            unc = _frozen_array(self.uncertainty, "uncertainty")
            if unc.size != omegas.size:
                raise DomainError("uncertainty must match the length of omegas")
            object.__setattr__(self, "uncertainty", unc)
        object.__setattr__(self, "omegas", omegas)
        object.__setattr__(self, "amplitudes", amps)

    def __len__(self):
        return self.omegas.size


@dataclass(frozen=True)
class FitResult:
    """Outcome of a least-squares fit.

    ``stderr`` entries may be ``inf`` for directions the data do not constrain.
    """

    params: Mapping[str, float]
    stderr: Mapping[str, float]
    residual_norm: float
    converged: bool
    iterations: int
    grad_norm: float = 0.0
    gtol: float = math.inf
    message: str = ""
    covariance: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    warnings: tuple = ()

    def __post_init__(self):
        if set(self.params) != set(self.stderr):
            raise DomainError("params and stderr must have the same keys")
        if any(not (v >= 0) for v in self.stderr.values()):
            raise DomainError("stderr entries must be >= 0")
        if self.iterations < 0:
            raise DomainError("iterations must be >= 0")
        if self.converged and not self.grad_norm <= self.gtol:
            raise DomainError("a converged result must have gradient norm below tolerance")
        object.__setattr__(self, "params", dict(self.params))
        object.__setattr__(self, "stderr", dict(self.stderr))

    def __getitem__(self, name):
        return self.params[name]

    def to_dict(self) -> dict:
        return {
            "params": dict(self.params),
            "stderr": dict(self.stderr),
            "residual_norm": self.residual_norm,
            "converged": self.converged,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "message": self.message,
            "warnings": list(self.warnings),
        }
