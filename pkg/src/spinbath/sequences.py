"""Canonical pulse sequences, toggling-frame modulation and filter functions.

Filter convention: ``F(w t) = (w^2 / 2) |int_0^t f(t') exp(i w t') dt'|^2`` so that
the decoherence exponent is ``chi(t) = (1/pi) int_0^inf S(w) F(w t) / w^2 dw``.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate

from .domain import DomainError, PulseSequence

__all__ = [
    "FAMILIES",
    "SequenceSpec",
    "ModulationFunction",
    "parse_label",
    "build_sequence",
    "cancel_coincident",
    "sensor_modulation",
    "bath_modulation",
    "effective_modulation",
    "filter_function",
    "filter_function_closed_form",
    "filter_function_quadrature",
    "check_label",
]

FAMILIES = ("Ramsey", "Hahn", "CPMG", "DEER", "DEER-echo", "custom")

# comparison tolerance for flip times, relative to total_time
TIME_RTOL = 1e-12

_CPMG_RE = re.compile(r"^CPMG-(\d+)$")


def parse_label(label: str) -> tuple[str, int]:
    """Split a family tag such as ``"CPMG-8"`` into ``("CPMG", 8)``."""
    m = _CPMG_RE.match(label)
    if m:
        return "CPMG", int(m.group(1))
    if label in FAMILIES and label != "CPMG":
        return label, {"Hahn": 1, "DEER": 1, "DEER-echo": 1}.get(label, 0)
    raise DomainError(f"unknown sequence family {label!r}; expected one of {FAMILIES}")


def cancel_coincident(times: Sequence[float], tol: float) -> tuple:
    """Sort flip times and drop pairs that coincide within ``tol``.

    Two pi flips at the same instant compose to the identity.
    """
    out: list[float] = []
    for t in sorted(float(x) for x in times):
        if out and abs(t - out[-1]) <= tol:
            out.pop()
        else:
            out.append(t)
    return tuple(out)


def build_sequence(
    family: str,
    total_time: float,
    n_pulses: Optional[int] = None,
    tau_offset: Optional[float] = None,
    *,
    sensor_flips: Sequence[float] = (),
    bath_flips: Sequence[float] = (),
) -> PulseSequence:
    """Construct a :class:`PulseSequence` for one of the canonical families.

    ``family`` may carry the pulse count (``"CPMG-4"``) or take it from
    ``n_pulses``. ``tau_offset`` places the DEER-echo bath flip at
    ``total_time/2 + tau_offset``. ``"custom"`` takes explicit flip lists;
    coincident flips on either channel cancel pairwise.
    """
    T = float(total_time)
    if not (T > 0 and math.isfinite(T)):
        raise DomainError(f"total_time must be > 0 us, got {total_time!r}")
    if n_pulses is not None and n_pulses < 0:
        raise DomainError("n_pulses must be >= 0")
    base, n_from_label = parse_label(family) if family != "CPMG" else ("CPMG", None)
    if base == "CPMG":
        n = n_from_label if n_from_label is not None else n_pulses
        if n is None:
            raise DomainError("CPMG needs a pulse count")
        if n_pulses is not None and n_from_label is not None and n_pulses != n_from_label:
            raise DomainError(f"label {family!r} conflicts with n_pulses={n_pulses}")
        if n == 0:
            return PulseSequence(T, (), (), "Ramsey")
        flips = tuple((2 * k - 1) * T / (2 * n) for k in range(1, n + 1))
        return PulseSequence(T, flips, (), f"CPMG-{n}")
    if base == "Ramsey":
        return PulseSequence(T, (), (), "Ramsey")
    if base == "Hahn":
        return PulseSequence(T, (T / 2,), (), "Hahn")
    if base == "DEER":
        return PulseSequence(T, (T / 2,), (T / 2,), "DEER")
    if base == "DEER-echo":
        tau = 0.0 if tau_offset is None else float(tau_offset)
        tol = TIME_RTOL * T
        if not (-tol <= tau <= T / 2 + tol):
            raise DomainError(f"tau_offset must lie in [0, total_time/2], got {tau_offset!r}")
        bath_t = min(max(T / 2 + tau, T / 2), T)
        return PulseSequence(T, (T / 2,), (bath_t,), "DEER-echo")
    tol = TIME_RTOL * T
    return PulseSequence(
        T, cancel_coincident(sensor_flips, tol), cancel_coincident(bath_flips, tol), "custom"
    )


def check_label(seq: PulseSequence):
    """Raise if a family-tagged sequence does not have that family's flip pattern."""
    if seq.label == "custom":
        return
    base, n = parse_label(seq.label)
    T = seq.total_time
    tol = 1e-9 * T
    s, b = seq.sensor_flips, seq.bath_flips

    def close(a, c):
        return len(a) == len(c) and all(abs(x - y) <= tol for x, y in zip(a, c))

    ok = {
        "Ramsey": not s and not b,
        "Hahn": close(s, (T / 2,)) and not b,
        "DEER": close(s, (T / 2,)) and close(b, (T / 2,)),
        "DEER-echo": close(s, (T / 2,)) and len(b) == 1 and T / 2 - tol <= b[0] <= T + tol,
        "CPMG": not b and close(s, tuple((2 * k - 1) * T / (2 * n) for k in range(1, n + 1))),
    }[base]
    if not ok:
        raise DomainError(f"flip pattern is inconsistent with label {seq.label!r}")


@dataclass(frozen=True)
class SequenceSpec:
    """A sequence family that can be rebuilt at any total time.

    ``tau_offset`` fixes the DEER-echo offset in us; ``tau_fraction`` instead
    scales it with the total time (``tau = tau_fraction * t``).
    """

    family: str
    n_pulses: Optional[int] = None
    tau_offset: Optional[float] = None
    tau_fraction: Optional[float] = None

    def __post_init__(self):
        base, n = parse_label(self.family) if self.family != "CPMG" else ("CPMG", None)
        if base == "CPMG":
            n = n if n is not None else self.n_pulses
            if n is None:
                raise DomainError("CPMG needs a pulse count")
            object.__setattr__(self, "family", "CPMG")
            object.__setattr__(self, "n_pulses", int(n))
        if self.tau_offset is not None and self.tau_fraction is not None:
            raise DomainError("give tau_offset or tau_fraction, not both")

    @property
    def label(self) -> str:
        if self.family == "CPMG":
            return f"CPMG-{self.n_pulses}"
        return self.family

    def build(self, total_time: float) -> PulseSequence:
        tau = self.tau_offset
        if self.tau_fraction is not None:
            tau = self.tau_fraction * total_time
        return build_sequence(self.family, total_time, self.n_pulses, tau)


@dataclass(frozen=True)
class ModulationFunction:
    """Piecewise-constant +-1 sign starting at ``initial_sign`` and flipping at each breakpoint."""

    breakpoints: tuple
    total_time: float
    initial_sign: int = 1

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.size > 1 and not np.all(np.diff(bp) > 0):
            raise DomainError("breakpoints must be strictly increasing")
        if bp.size and not (bp[0] > 0 and bp[-1] < self.total_time):
            raise DomainError("breakpoints must lie inside (0, total_time)")
        if self.initial_sign not in (1, -1):
            raise DomainError("initial_sign must be +1 or -1")

    def segments(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (starts, ends, signs) of the constant pieces."""
        edges = np.concatenate(([0.0], np.asarray(self.breakpoints, float), [self.total_time]))
        n = edges.size - 1
        signs = self.initial_sign * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        return edges[:-1], edges[1:], signs

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        count = np.searchsorted(np.asarray(self.breakpoints, float), t, side="right")
        return self.initial_sign * np.where(count % 2 == 0, 1.0, -1.0)


def sensor_modulation(seq: PulseSequence) -> ModulationFunction:
    return ModulationFunction(seq.sensor_flips, seq.total_time)


def bath_modulation(seq: PulseSequence, initial_sign: int = 1) -> ModulationFunction:
    """Sign pattern of the bath spins; a flip at ``total_time`` is dropped as inert."""
    T = seq.total_time
    flips = tuple(t for t in seq.bath_flips if t < T * (1 - TIME_RTOL))
    return ModulationFunction(flips, T, initial_sign)


def effective_modulation(seq: PulseSequence) -> ModulationFunction:
    """Product of sensor and bath sign patterns, the weight seen by bath noise."""
    T = seq.total_time
    bath = bath_modulation(seq).breakpoints
    flips = cancel_coincident(tuple(seq.sensor_flips) + tuple(bath), TIME_RTOL * T)
    return ModulationFunction(flips, T)


def _fourier_sum(mod: ModulationFunction, omega: np.ndarray) -> np.ndarray:
    # sum_k s_k (exp(i w b_k) - exp(i w a_k)) = i w * int f exp(i w t) dt
    starts, ends, signs = mod.segments()
    w = omega[..., None]
    return np.sum(signs * (np.exp(1j * w * ends) - np.exp(1j * w * starts)), axis=-1)


def _check_omega(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    if np.any(~(w > 0)):
        raise DomainError("omega must be > 0")
    return w


def filter_function(seq: PulseSequence, omega, modulation: str = "sensor"):
    """Filter function ``F(w t)`` of ``seq`` at angular frequency ``omega`` (rad/us).

    Evaluated exactly from the piecewise-constant modulation. ``modulation``
    selects the sensor sign alone (``"sensor"``) or the sensor-times-bath
    product (``"effective"``) that governs DEER-type sequences.
    """
    w = _check_omega(omega)
    mod = sensor_modulation(seq) if modulation == "sensor" else effective_modulation(seq)
    out = 0.5 * np.abs(_fourier_sum(mod, w)) ** 2
    return out if out.ndim else float(out)


def filter_function_closed_form(seq: PulseSequence, omega):
    """Textbook closed forms for Ramsey, Hahn and CPMG-N.

    CPMG-N uses ``8 sin^4(wt/4N) sin^2(wt/2) / cos^2(wt/2N)`` for even N and
    ``cos^2(wt/2)`` in place of ``sin^2(wt/2)`` for odd N. The removable
    singularities at ``cos(wt/2N) = 0`` fall back to the exact sum.
    """
    w = _check_omega(omega)
    x = w * seq.total_time
    base, n = parse_label(seq.label)
    if base == "Ramsey":
        out = 2.0 * np.sin(x / 2) ** 2
    elif base in ("Hahn", "CPMG"):
        n = max(n, 1)
        num = 8.0 * np.sin(x / (4 * n)) ** 4
        trig = np.sin(x / 2) ** 2 if n % 2 == 0 else np.cos(x / 2) ** 2
        den = np.cos(x / (2 * n)) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            out = num * trig / den
        bad = np.abs(np.cos(x / (2 * n))) < 1e-4
        if np.any(bad):
            out = np.where(bad, filter_function(seq, np.where(bad, w, 1.0)), out)
    else:
        raise DomainError(f"no closed form for {seq.label!r}")
    return out if np.ndim(out) else float(out)


def filter_function_quadrature(seq: PulseSequence, omega: float, modulation: str = "sensor") -> float:
    """Reference value of ``F`` by adaptive quadrature of the defining integral."""
    w = float(_check_omega(omega))
    mod = sensor_modulation(seq) if modulation == "sensor" else effective_modulation(seq)
    re_part = im_part = 0.0
    for a, b, s in zip(*mod.segments()):
        re_part += s * integrate.quad(lambda t: 1.0, a, b, weight="cos", wvar=w, limit=500)[0]
        im_part += s * integrate.quad(lambda t: 1.0, a, b, weight="sin", wvar=w, limit=500)[0]
    return 0.5 * w**2 * (re_part**2 + im_part**2)
