"""Discrete-spin Monte Carlo of sensor dephasing by a random-telegraph surface bath.

Each trial draws a fresh Poisson bath on a disk centred above the sensor,
evolves every spin as a two-state telegraph process with flip rate
``1 / (2 tau_c)`` (so ``<s(0)s(t)> = exp(-t/tau_c) / 4``), accumulates the phase
``phi = sum_i a_i int h(t) s_i(t) dt`` and records ``cos(phi)``. Nothing is
Gaussian here, so the engine also covers baths dominated by a few close spins.

Every trial draws from its own counter-based Philox substream keyed by the
master seed, blocks of :data:`BLOCK` trials run on a thread pool, and the
per-trial results are reduced in trial order, so the output is bit-identical
for any worker count.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numba
import numpy as np

from .domain import (
    CONSTANTS,
    CoherenceCurve,
    DomainError,
    NVSensor,
    PhysicalConstants,
    PulseSequence,
    SpinBathParams,
    TauSweep,
    dipolar_prefactor,
)
from .sequences import SequenceSpec, build_sequence, effective_modulation

__all__ = [
    "BLOCK",
    "WORKERS_ENV",
    "SimConfig",
    "BathRealization",
    "TelegraphTrajectory",
    "CoherenceEstimate",
    "sample_bath",
    "dipolar_couplings",
    "telegraph_evolve",
    "simulate_coherence",
    "simulate_sequences",
    "simulate_curve",
    "simulate_tau_sweep",
    "dipolar_variance_oracle",
    "poisson_bath_coherence",
]

BLOCK = 256
WORKERS_ENV = "SPINBATH_WORKERS"


@dataclass(frozen=True)
class SimConfig:
    n_trials: int = 10_000
    disk_radius_factor: float = 100.0
    rng_seed: int = 0
    fixed_count: bool = False
    workers: Optional[int] = None
    #: upper bound on telegraph waiting-time steps; events are generated exactly,
    #: so any positive cap leaves the statistics unchanged
    time_step: Optional[float] = None

    def __post_init__(self):
        if self.time_step is not None and not self.time_step > 0:
            raise DomainError("time_step must be > 0 us")
        if self.n_trials < 1:
            raise DomainError("n_trials must be >= 1")
        if self.disk_radius_factor < 10:
            raise DomainError("disk_radius_factor must be >= 10")
        if not 0 <= self.rng_seed < 2**64:
            raise DomainError("rng_seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class BathRealization:
    positions: np.ndarray  # (n, 3) nm, sensor at the origin
    couplings: np.ndarray  # rad/us
    states: np.ndarray  # +-1/2

    def __post_init__(self):
        n = len(self.couplings)
        if self.positions.shape != (n, 3) or len(self.states) != n:
            raise DomainError("positions, couplings and states must have equal length")
        if not np.all(np.isfinite(self.couplings)):
            raise DomainError("couplings must be finite")

    def __len__(self):
        return len(self.couplings)


class TelegraphTrajectory(NamedTuple):
    """Flip times of all spins in CSR layout: spin ``i`` flips at ``times[offsets[i]:offsets[i+1]]``."""

    initial: np.ndarray
    times: np.ndarray
    offsets: np.ndarray
    duration: float

    def flips(self, i: int) -> np.ndarray:
        return self.times[self.offsets[i] : self.offsets[i + 1]]

    def state(self, i: int, t) -> np.ndarray:
        n = np.searchsorted(self.flips(i), np.asarray(t, float), side="right")
        return self.initial[i] * np.where(n % 2 == 0, 1.0, -1.0)

    def states_at(self, t: float) -> np.ndarray:
        """Sign of every spin at time ``t``."""
        spin = np.repeat(np.arange(self.initial.size), np.diff(self.offsets))
        n = np.bincount(spin[self.times <= t], minlength=self.initial.size)
        return self.initial * np.where(n % 2 == 0, 1.0, -1.0)


class CoherenceEstimate(NamedTuple):
    value: float
    stderr: float
    sin_mean: float
    sin_stderr: float


def dipolar_couplings(positions: np.ndarray, sensor: NVSensor, constants: PhysicalConstants = CONSTANTS) -> np.ndarray:
    """Secular coupling ``kappa (1 - 3 cos^2 theta) / r^3`` (rad/us) for spins at ``positions``."""
    r = np.linalg.norm(positions, axis=1)
    cos = positions @ sensor.axis / r
    return dipolar_prefactor(constants) * (1 - 3 * cos**2) / r**3


def sample_bath(
    bath: SpinBathParams,
    sensor: NVSensor,
    seed,
    cfg: SimConfig = SimConfig(),
    constants: PhysicalConstants = CONSTANTS,
) -> BathRealization:
    """Draw one bath realization on a disk of radius ``disk_radius_factor * depth``."""
    rng = np.random.default_rng(seed)
    radius = cfg.disk_radius_factor * sensor.depth
    mean = bath.sigma * math.pi * radius**2
    n = int(round(mean)) if cfg.fixed_count else int(rng.poisson(mean))
    rho = radius * np.sqrt(rng.random(n))
    phi = 2 * math.pi * rng.random(n)
    pos = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), np.full(n, sensor.depth)])
    states = np.where(rng.random(n) < 0.5, 0.5, -0.5)
    return BathRealization(pos, dipolar_couplings(pos, sensor, constants), states)


def telegraph_evolve(realization: Union[BathRealization, int], tau_c: float, duration: float, seed) -> TelegraphTrajectory:
    """Event-driven telegraph trajectories over ``[0, duration]``.

    Waiting times are exponential with rate ``1 / (2 tau_c)``; an infinite
    ``tau_c`` gives static spins.
    """
    if not tau_c > 0:
        raise DomainError("tau_c must be > 0")
    rng = np.random.default_rng(seed)
    if isinstance(realization, BathRealization):
        initial = np.sign(realization.states)
    else:
        initial = np.where(rng.random(int(realization)) < 0.5, 1.0, -1.0)
    n = initial.size
    rate = 0.0 if math.isinf(tau_c) else 1.0 / (2.0 * tau_c)
    if rate == 0 or n == 0:
        return TelegraphTrajectory(initial, np.empty(0), np.zeros(n + 1, dtype=np.int64), duration)
    counts = rng.poisson(rate * duration, size=n)
    # given the count, Poisson event times are uniform order statistics
    times = rng.random(counts.sum()) * duration
    offsets = np.concatenate([[0], np.cumsum(counts)])
    for i in range(n):
        times[offsets[i] : offsets[i + 1]].sort()
    return TelegraphTrajectory(initial, times, offsets, duration)


@numba.njit(cache=True, nogil=True)
def _overlap(breaks, nb, total, flips, nf):
    # int_0^total h(t) sgn(t) dt with h, sgn starting at +1 and flipping at breaks / flips
    t = 0.0
    sh = 1.0
    ss = 1.0
    i = 0
    j = 0
    acc = 0.0
    while True:
        nh = breaks[i] if i < nb else total
        ns = flips[j] if j < nf else total
        if ns > total:
            ns = total
        nxt = nh if nh < ns else ns
        acc += sh * ss * (nxt - t)
        t = nxt
        if t >= total:
            break
        if i < nb and nh == nxt:
            sh = -sh
            i += 1
        if j < nf and ns == nxt:
            ss = -ss
            j += 1
    return acc


@numba.njit(cache=True, nogil=True)
def _trial_phases(u_pos, u_state, counts, u_flips, radius, depth, nx, nz, kappa, horizon,
                  breaks, nbreaks, totals, static, phases):
    nq = totals.size
    phases[:] = 0.0
    buf = np.empty(max(1, counts.max()) if counts.size else 1)
    off = 0
    for i in range(counts.size):
        rho = radius * math.sqrt(u_pos[i, 0])
        x = rho * math.cos(2.0 * math.pi * u_pos[i, 1])
        r2 = rho * rho + depth * depth
        r = math.sqrt(r2)
        c = (x * nx + depth * nz) / r
        a = kappa * (1.0 - 3.0 * c * c) / (r2 * r)
        if u_state[i] >= 0.5:
            a = -a
        a *= 0.5
        nf = counts[i]
        if nf == 0:
            for q in range(nq):
                phases[q] += a * static[q]
            continue
        # Poisson event times given the count: sorted uniforms
        for k in range(nf):
            v = u_flips[off + k] * horizon
            j = k
            while j > 0 and buf[j - 1] > v:
                buf[j] = buf[j - 1]
                j -= 1
            buf[j] = v
        off += nf
        for q in range(nq):
            phases[q] += a * _overlap(breaks[q], nbreaks[q], totals[q], buf, nf)


def _workers(cfg: SimConfig) -> int:
    if cfg.workers is not None:
        return max(1, int(cfg.workers))
    env = os.environ.get(WORKERS_ENV)
    return max(1, int(env)) if env else 1


def _trial_generator(key: np.ndarray, trial: int) -> np.random.Generator:
    # counter-based substream: trial index sits in its own counter word
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, trial, 0]))


def simulate_sequences(
    sequences: Sequence[PulseSequence],
    bath: SpinBathParams,
    sensor: NVSensor,
    cfg: SimConfig = SimConfig(),
    constants: PhysicalConstants = CONSTANTS,
) -> list[CoherenceEstimate]:
    """Coherence of several sequences estimated on shared bath trials.

    Bath pi pulses invert every spin at the flip instant, which is folded into
    the combined sign ``h`` seen by the sensor.
    """
    sequences = list(sequences)
    if not sequences:
        return []
    mods = [effective_modulation(s) for s in sequences]
    nq = len(sequences)
    width = max(1, max(len(m.breakpoints) for m in mods))
    breaks = np.zeros((nq, width))
    nbreaks = np.zeros(nq, dtype=np.int64)
    totals = np.array([s.total_time for s in sequences], dtype=float)
    static = np.empty(nq)
    for q, m in enumerate(mods):
        bp = np.asarray(m.breakpoints, float)
        breaks[q, : bp.size] = bp
        nbreaks[q] = bp.size
        starts, ends, signs = m.segments()
        static[q] = float(np.sum(signs * (ends - starts)))
    radius = cfg.disk_radius_factor * sensor.depth
    mean = bath.sigma * math.pi * radius**2
    rate = 0.0 if math.isinf(bath.tau_c) else 1.0 / (2.0 * bath.tau_c)
    axis = sensor.axis
    kappa = dipolar_prefactor(constants)
    horizon = float(totals.max())
    key = np.random.SeedSequence(cfg.rng_seed).generate_state(2, dtype=np.uint64)
    out_cos = np.empty((cfg.n_trials, nq))
    out_sin = np.empty((cfg.n_trials, nq))

    def run(block):
        phases = np.empty(nq)
        for k in range(block * BLOCK, min((block + 1) * BLOCK, cfg.n_trials)):
            gen = _trial_generator(key, k)
            n = int(round(mean)) if cfg.fixed_count else int(gen.poisson(mean))
            u_pos = gen.random((n, 2))
            u_state = gen.random(n)
            counts = gen.poisson(rate * horizon, n) if rate > 0 else np.zeros(n, dtype=np.int64)
            u_flips = gen.random(int(counts.sum()))
            _trial_phases(u_pos, u_state, counts, u_flips, radius, sensor.depth, axis[0], axis[2], kappa,
                          horizon, breaks, nbreaks, totals, static, phases)
            out_cos[k] = np.cos(phases)
            out_sin[k] = np.sin(phases)

    n_blocks = -(-cfg.n_trials // BLOCK)
    workers = _workers(cfg)
    if workers == 1:
        for block in range(n_blocks):
            run(block)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, range(n_blocks)))
    n = cfg.n_trials
    mean_c = out_cos.mean(axis=0)
    mean_s = out_sin.mean(axis=0)
    if n > 1:
        se_c = out_cos.std(axis=0, ddof=1) / math.sqrt(n)
        se_s = out_sin.std(axis=0, ddof=1) / math.sqrt(n)
    else:
        se_c = se_s = np.full(nq, math.inf)
    return [CoherenceEstimate(float(a), float(b), float(c), float(d))
            for a, b, c, d in zip(mean_c, se_c, mean_s, se_s)]


def simulate_coherence(
    seq: PulseSequence,
    bath: SpinBathParams,
    sensor: NVSensor,
    cfg: SimConfig = SimConfig(),
    constants: PhysicalConstants = CONSTANTS,
) -> CoherenceEstimate:
    """Monte Carlo estimate of ``<cos phi>`` for one sequence, with its standard error."""
    return simulate_sequences([seq], bath, sensor, cfg, constants)[0]


def simulate_curve(
    family: Union[str, SequenceSpec],
    times: Sequence[float],
    bath: SpinBathParams,
    sensor: NVSensor,
    cfg: SimConfig = SimConfig(),
    n_pulses: Optional[int] = None,
    tau_offset: Optional[float] = None,
    constants: PhysicalConstants = CONSTANTS,
) -> CoherenceCurve:
    spec = family if isinstance(family, SequenceSpec) else SequenceSpec(family, n_pulses, tau_offset)
    times = np.asarray(times, dtype=float)
    live = times > 0
    est = simulate_sequences([spec.build(t) for t in times[live]], bath, sensor, cfg, constants)
    values = np.ones_like(times)
    unc = np.zeros_like(times)
    values[live] = [e.value for e in est]
    unc[live] = [e.stderr for e in est]
    # a single trial has no spread estimate
    return CoherenceCurve(times, values, spec, unc if np.all(np.isfinite(unc)) else None, cfg.rng_seed)


def simulate_tau_sweep(
    total_time: float,
    taus: Sequence[float],
    bath: SpinBathParams,
    sensor: NVSensor,
    cfg: SimConfig = SimConfig(),
    constants: PhysicalConstants = CONSTANTS,
) -> TauSweep:
    taus = np.asarray(taus, dtype=float)
    seqs = [build_sequence("DEER-echo", total_time, tau_offset=t) for t in taus]
    est = simulate_sequences(seqs, bath, sensor, cfg, constants)
    unc = np.array([e.stderr for e in est])
    return TauSweep(taus, [e.value for e in est], total_time, unc if np.all(np.isfinite(unc)) else None, cfg.rng_seed)


def dipolar_variance_oracle(
    sigma: float,
    sensor: NVSensor,
    n_samples: int = 2_000_000,
    radius_factor: float = 100.0,
    n_annuli: int = 40,
    seed: int = 0,
    constants: PhysicalConstants = CONSTANTS,
) -> tuple[float, float]:
    """Brute-force ``B_rms`` (tesla) from sampled spin positions, with its standard error.

    Positions are drawn uniformly inside geometrically spaced annuli covering a
    disk of radius ``radius_factor * depth`` (stratified sampling), and
    ``(gamma B)^2 = sigma/4 * sum_i a_i^2`` is estimated from the area-weighted
    mean of ``a^2`` in each annulus.
    """
    rng = np.random.default_rng(seed)
    d = sensor.depth
    radius = radius_factor * d
    edges = np.concatenate([[0.0], np.geomspace(d / 16, radius, n_annuli)])
    per = max(n_samples // (edges.size - 1), 2)
    total = 0.0
    var = 0.0
    for r0, r1 in zip(edges[:-1], edges[1:]):
        rho = np.sqrt(r0**2 + rng.random(per) * (r1**2 - r0**2))
        phi = 2 * math.pi * rng.random(per)
        pos = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), np.full(per, d)])
        a2 = dipolar_couplings(pos, sensor, constants) ** 2
        area = math.pi * (r1**2 - r0**2)
        total += area * a2.mean()
        var += area**2 * a2.var(ddof=1) / per
    gb2 = 0.25 * sigma * total
    gb2_se = 0.25 * sigma * math.sqrt(var)
    gamma = constants.gamma_angular
    b = math.sqrt(gb2) / gamma
    return b, 0.5 * gb2_se / math.sqrt(gb2) / gamma if gb2 > 0 else 0.0


def _single_spin_coherence(a: np.ndarray, seq: PulseSequence, rate: float) -> np.ndarray:
    """Exact ``<cos phi>`` of one telegraph spin of coupling ``a`` under ``seq``.

    Propagates the two-state master equation with the phase factor
    ``exp(+-i a h / 2)`` segment by segment.
    """
    starts, ends, signs = effective_modulation(seq).segments()
    w = 0.5 * np.asarray(a, dtype=complex)
    mu = np.sqrt(rate**2 - w**2 + 0j)
    vp = np.full(w.shape, 0.5, dtype=complex)
    vm = np.full(w.shape, 0.5, dtype=complex)
    for a0, b0, h in zip(starts, ends, signs):
        L = b0 - a0
        ch = np.cosh(mu * L)
        small = np.abs(mu * L) < 1e-8
        sh_over = np.where(small, L, np.sinh(mu * L) / np.where(small, 1.0, mu))
        damp = math.exp(-rate * L)
        iw = 1j * w * h
        np_ = damp * (ch * vp + sh_over * (iw * vp + rate * vm))
        nm_ = damp * (ch * vm + sh_over * (rate * vp - iw * vm))
        vp, vm = np_, nm_
    return (vp + vm).real


def poisson_bath_coherence(
    seq: PulseSequence,
    bath: SpinBathParams,
    sensor: NVSensor,
    radius_factor: float = 100.0,
    n_rho: int = 3000,
    n_phi: int = 256,
    constants: PhysicalConstants = CONSTANTS,
) -> float:
    """Ensemble coherence of a Poisson telegraph bath without the Gaussian approximation.

    For independent spins ``<cos phi> = exp(-sigma int (1 - c1(a(r))) dA)`` where
    ``c1`` is the exact single-spin telegraph coherence; the disk integral is
    done on a polar grid (midpoint in angle, trapezoid in a stretched radius).
    """
    d = sensor.depth
    radius = radius_factor * d
    u = np.linspace(0.0, 1.0, n_rho)
    rho = radius * u**3  # dense near the axis
    drho = np.gradient(rho)
    phi = (np.arange(n_phi) + 0.5) * 2 * math.pi / n_phi
    R, P = np.meshgrid(rho, phi, indexing="ij")
    pos = np.stack([R * np.cos(P), R * np.sin(P), np.full_like(R, d)], axis=-1).reshape(-1, 3)
    a = dipolar_couplings(pos, sensor, constants)
    rate = 0.0 if math.isinf(bath.tau_c) else 1.0 / (2.0 * bath.tau_c)
    c1 = _single_spin_coherence(a, seq, rate).reshape(R.shape)
    w = (R * drho[:, None]) * (2 * math.pi / n_phi)
    w[0] *= 0.5
    w[-1] *= 0.5
    return math.exp(-bath.sigma * float(np.sum((1.0 - c1) * w)))
