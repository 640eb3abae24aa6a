"""Analytic coherence under Ornstein-Uhlenbeck (Gaussian, Lorentzian) bath noise."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .domain import CONSTANTS, CoherenceCurve, DomainError, PhysicalConstants, PulseSequence, TauSweep
from .sequences import SequenceSpec, TIME_RTOL, build_sequence, effective_modulation

__all__ = [
    "OUNoise",
    "DipModel",
    "ou_phi",
    "chi_correlation",
    "coherence",
    "coherence_curve",
    "deer_echo_sweep",
    "deer_echo_chi",
    "chi_deer",
    "chi_hahn",
    "chi_ramsey",
    "stretched_exp",
    "resonance_frequency",
    "flip_probability",
    "deer_dip",
]


def ou_phi(x):
    """``exp(-x) + x - 1`` without cancellation for small ``x``."""
    x = np.asarray(x, dtype=float)
    series = x * x * (0.5 - x / 6.0 + x * x / 24.0)
    out = np.where(x < 1e-6, series, np.expm1(-x) + x)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class OUNoise:
    """Gaussian field noise with ``<B(t1)B(t2)> = b_rms^2 exp(-|t1-t2|/tau_c)``.

    ``b_rms`` in tesla, ``tau_c`` in us. A zero amplitude is accepted and
    describes an empty bath.
    """

    b_rms: float
    tau_c: float

    def __post_init__(self):
        if not (self.b_rms >= 0 and math.isfinite(self.b_rms)):
            raise DomainError(f"b_rms must be >= 0 T, got {self.b_rms!r}")
        if not self.tau_c > 0:
            raise DomainError(f"tau_c must be > 0 us, got {self.tau_c!r}")

    @classmethod
    def from_coupling(cls, coupling: float, tau_c: float, constants: PhysicalConstants = CONSTANTS):
        """Build from the coupling strength ``K = gamma^2 b_rms^2 tau_c`` in 1/us."""
        if coupling < 0:
            raise DomainError("coupling strength must be >= 0")
        return cls(math.sqrt(coupling / tau_c) / constants.gamma_angular, tau_c)

    @classmethod
    def from_lorentzian(cls, delta: float, tau: float, constants: PhysicalConstants = CONSTANTS):
        """Noise whose spectrum is ``delta^2 tau / (1 + (w tau)^2)`` (``delta`` in rad/us)."""
        return cls(abs(delta) / math.sqrt(2.0) / constants.gamma_angular, tau)

    def rate_sq(self, constants: PhysicalConstants = CONSTANTS) -> float:
        """``(gamma b_rms)^2`` in rad^2/us^2."""
        return (constants.gamma_angular * self.b_rms) ** 2

    def coupling_strength(self, constants: PhysicalConstants = CONSTANTS) -> float:
        """``K = gamma^2 b_rms^2 tau_c`` in 1/us (multiply by 1e3 for kHz)."""
        return self.rate_sq(constants) * self.tau_c

    def spectrum(self, omega, constants: PhysicalConstants = CONSTANTS):
        """One-sided spectral density in rad^2/us under the package filter convention."""
        w = np.asarray(omega, dtype=float)
        return 2.0 * self.rate_sq(constants) * self.tau_c / (1.0 + (w * self.tau_c) ** 2)


def _segments(seq: PulseSequence):
    return effective_modulation(seq).segments()


def chi_correlation(
    seq: PulseSequence,
    noise: OUNoise,
    t: Optional[float] = None,
    constants: PhysicalConstants = CONSTANTS,
) -> float:
    """Decoherence exponent of ``seq`` under OU noise.

    Integrates ``(gamma^2/2) int int h(t1) h(t2) <B(t1)B(t2)> dt1 dt2`` exactly over
    the constant pieces of the combined sensor/bath sign ``h``. Adjacent pieces
    are coupled through a running sum, so the cost is linear in the flip count.
    """
    if t is not None and abs(t - seq.total_time) > TIME_RTOL * seq.total_time:
        raise DomainError(f"t={t!r} does not match the sequence total_time={seq.total_time!r}")
    tau = noise.tau_c
    starts, ends, signs = _segments(seq)
    x = (ends - starts) / tau
    diag = float(np.sum(ou_phi(x)))
    edge = -np.expm1(-x)  # 1 - exp(-L/tau)
    decay = np.exp(-x)
    cross = 0.0
    running = 0.0  # sum_{j<k} s_j E_j exp(-(a_k - b_j)/tau)
    for k in range(x.size):
        cross += signs[k] * edge[k] * running
        running = running * decay[k] + signs[k] * edge[k]
    return noise.rate_sq(constants) * tau * tau * (diag + cross)


def coherence(seq: PulseSequence, noise: OUNoise, constants: PhysicalConstants = CONSTANTS) -> float:
    return math.exp(-chi_correlation(seq, noise, constants=constants))


def chi_deer(t, noise: OUNoise, constants: PhysicalConstants = CONSTANTS):
    """Closed form ``gamma^2 b^2 tau_c^2 (exp(-t/tau_c) + t/tau_c - 1)``; also the Ramsey exponent."""
    return noise.rate_sq(constants) * noise.tau_c**2 * ou_phi(np.asarray(t, float) / noise.tau_c)


chi_ramsey = chi_deer


def chi_hahn(t, noise: OUNoise, constants: PhysicalConstants = CONSTANTS):
    """Closed form ``(gamma b tau_c)^2 (t/tau_c - 3 + 4 exp(-t/2tau_c) - exp(-t/tau_c))``."""
    x = np.asarray(t, float) / noise.tau_c
    bracket = 2.0 * ou_phi(x / 2) - np.expm1(-x / 2) ** 2
    return noise.rate_sq(constants) * noise.tau_c**2 * bracket


def coherence_curve(
    family: Union[str, SequenceSpec],
    noise: OUNoise,
    times: Sequence[float],
    n_pulses: Optional[int] = None,
    tau_offset: Optional[float] = None,
    tau_fraction: Optional[float] = None,
    constants: PhysicalConstants = CONSTANTS,
) -> CoherenceCurve:
    """Coherence ``exp(-chi)`` with the family rebuilt at every total time.

    For DEER-echo the bath-flip offset is either fixed (``tau_offset``) or
    proportional to the total time (``tau_fraction``). A time of exactly zero
    yields coherence 1.
    """
    times = np.asarray(times, dtype=float)
    if np.any(times < 0):
        raise DomainError("times must be >= 0")
    if isinstance(family, SequenceSpec):
        spec = family
    else:
        spec = SequenceSpec(family, n_pulses, tau_offset, tau_fraction)
    values = np.array([1.0 if t == 0 else coherence(spec.build(t), noise, constants) for t in times])
    return CoherenceCurve(times, values, spec)


def deer_echo_sweep(
    noise: OUNoise,
    total_time: float,
    taus: Sequence[float],
    constants: PhysicalConstants = CONSTANTS,
) -> TauSweep:
    """DEER-echo coherence versus bath-flip offset at fixed echo time."""
    taus = np.asarray(taus, dtype=float)
    values = np.array(
        [coherence(build_sequence("DEER-echo", total_time, tau_offset=tau), noise, constants) for tau in taus]
    )
    return TauSweep(taus, values, total_time)


def deer_echo_chi(taus, total_time: float, noise: OUNoise, constants: PhysicalConstants = CONSTANTS):
    """Vectorised DEER-echo exponent over bath-flip offsets ``taus`` at echo time ``total_time``.

    The combined sign is ``+`` on ``[0, t/2)``, ``-`` on ``[t/2, t/2 + tau)`` and
    ``+`` afterwards; this is the three-piece case of :func:`chi_correlation`.
    """
    tau_c = noise.tau_c
    taus = np.asarray(taus, dtype=float)
    x1 = np.full_like(taus, 0.5 * total_time / tau_c)
    x2 = taus / tau_c
    x3 = np.clip(0.5 * total_time - taus, 0.0, None) / tau_c
    e1, e2, e3 = -np.expm1(-x1), -np.expm1(-x2), -np.expm1(-x3)
    bracket = ou_phi(x1) + ou_phi(x2) + ou_phi(x3) - e1 * e2 + e3 * (e1 * np.exp(-x2) - e2)
    return noise.rate_sq(constants) * tau_c**2 * bracket


def stretched_exp(t, T2: float, p: float):
    """``exp(-(t/T2)^p)``."""
    if not T2 > 0:
        raise DomainError(f"T2 must be > 0, got {T2!r}")
    if not p > 0:
        raise DomainError(f"p must be > 0, got {p!r}")
    out = np.exp(-((np.asarray(t, dtype=float) / T2) ** p))
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class DipModel:
    """Bath-spin resonance driven by a rectangular pi pulse.

    center and rabi in MHz; the pulse length is ``1 / (2 rabi)`` us.
    """

    center: float
    rabi: float
    contrast_scale: float = 1.0

    def __post_init__(self):
        if not self.center > 0:
            raise DomainError(f"center must be > 0 MHz, got {self.center!r}")
        if not self.rabi > 0:
            raise DomainError(f"rabi must be > 0 MHz, got {self.rabi!r}")


def resonance_frequency(bias_field_gauss: float, g_ratio: float = 1.0, constants: PhysicalConstants = CONSTANTS) -> float:
    """Free-electron resonance in MHz at the given bias field; ``g_ratio`` rescales g."""
    return g_ratio * constants.gamma_mhz_per_gauss * bias_field_gauss


def flip_probability(freqs, model: DipModel):
    """Rabi inversion probability of a bath spin for a drive at ``freqs`` (MHz)."""
    f = np.asarray(freqs, dtype=float)
    detuning = 2.0 * math.pi * (f - model.center)
    rabi = 2.0 * math.pi * model.rabi
    t_pi = 1.0 / (2.0 * model.rabi)
    gen = np.sqrt(rabi**2 + detuning**2)
    return rabi**2 / gen**2 * np.sin(0.5 * gen * t_pi) ** 2


def deer_dip(freqs, model: DipModel, baseline_chi: float):
    """DEER spectrum: ``exp(-p(f) * baseline_chi * contrast_scale)``.

    ``baseline_chi`` is usually :func:`chi_deer` at the fixed sequence time.
    """
    p = flip_probability(freqs, model)
    return np.exp(-p * baseline_chi * model.contrast_scale)
