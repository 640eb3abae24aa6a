import math

import numpy as np
import pytest

from spinbath.decoherence import OUNoise, coherence
from spinbath.domain import CONSTANTS, DomainError, NVSensor, SpinBathParams
from spinbath.montecarlo import (
    SimConfig,
    _single_spin_coherence,
    poisson_bath_coherence,
    sample_bath,
    simulate_coherence,
    simulate_curve,
    simulate_sequences,
    simulate_tau_sweep,
    telegraph_evolve,
)
from spinbath.sequences import build_sequence

SENSOR = NVSensor()
SURFACE_BATH = SpinBathParams(0.0025, 21.0).resolved(SENSOR)

# many weak spins: same b_rms as the surface bath, sixteen times denser, twice as deep
GAUSS_SENSOR = NVSensor(depth=20.0)
GAUSS_BATH = SpinBathParams(0.04, 21.0).resolved(GAUSS_SENSOR)


def gaussian_tag(seq, bath, sensor, factor, tol=0.005):
    """True when the exact discrete-bath average is within ``tol`` of the Gaussian result."""
    exact = poisson_bath_coherence(seq, bath, sensor, radius_factor=factor)
    return abs(exact - coherence(seq, OUNoise(bath.b_rms, bath.tau_c))) < tol


def test_config_validation():
    with pytest.raises(DomainError):
        SimConfig(n_trials=0)
    with pytest.raises(DomainError):
        SimConfig(disk_radius_factor=5)
    with pytest.raises(DomainError):
        SimConfig(time_step=0.0)


def test_empty_bath_has_no_spins():
    r = sample_bath(SpinBathParams(0.0, 1.0), SENSOR, 0)
    assert len(r) == 0


def test_mean_spin_count():
    counts = [len(sample_bath(SURFACE_BATH, SENSOR, k)) for k in range(200)]
    mean = 0.0025 * math.pi * 1000.0**2
    assert mean == pytest.approx(7854, abs=1)
    assert abs(np.mean(counts) - mean) < 3 * math.sqrt(mean / 200)


def test_fixed_count_mode():
    r = sample_bath(SURFACE_BATH, SENSOR, 0, SimConfig(fixed_count=True))
    assert len(r) == round(0.0025 * math.pi * 1e6)


def test_realization_geometry_and_states():
    r = sample_bath(SURFACE_BATH, SENSOR, 1)
    np.testing.assert_array_equal(r.positions[:, 2], 10.0)
    assert np.all(np.hypot(r.positions[:, 0], r.positions[:, 1]) <= 1000.0)
    assert set(np.unique(r.states)) == {-0.5, 0.5}
    assert np.all(np.isfinite(r.couplings))


def test_variance_from_realizations_matches_closed_form():
    vals = [np.sum(sample_bath(SURFACE_BATH, SENSOR, k).couplings ** 2) / 4 for k in range(100)]
    target = (CONSTANTS.gamma_angular * SURFACE_BATH.b_rms) ** 2
    assert abs(np.mean(vals) / target - 1) < 0.03


def test_telegraph_rate():
    tau_c, T = 21.0, 10.0
    tr = telegraph_evolve(100_000, tau_c, T, seed=7)
    assert abs(tr.times.size / 1e5 / (T / (2 * tau_c)) - 1) < 0.02


def test_telegraph_autocorrelation():
    tau_c = 21.0
    tr = telegraph_evolve(100_000, tau_c, 2 * tau_c, seed=8)
    s0 = 0.5 * tr.states_at(0.0)
    s1 = 0.5 * tr.states_at(tau_c)
    assert abs(np.mean(s0 * s1) / (0.25 * math.exp(-1)) - 1) < 0.05


def test_telegraph_is_event_driven_and_sorted():
    tr = telegraph_evolve(50, 1.0, 30.0, seed=2)
    for i in range(50):
        f = tr.flips(i)
        assert np.all(np.diff(f) > 0) and np.all((0 <= f) & (f <= 30.0))


def test_static_spins_refocus_in_hahn():
    bath = SpinBathParams(0.0025, math.inf, b_rms=SURFACE_BATH.b_rms)
    tr = telegraph_evolve(sample_bath(bath, SENSOR, 0), math.inf, 50.0, seed=0)
    assert tr.times.size == 0
    for t in (5.0, 20.0, 80.0):
        est = simulate_coherence(build_sequence("Hahn", t), bath, SENSOR, SimConfig(n_trials=200))
        assert est.value == 1.0


def test_ramsey_short_time_limit():
    est = simulate_coherence(build_sequence("Ramsey", 1e-3), SURFACE_BATH, SENSOR, SimConfig(n_trials=300))
    assert est.value > 1 - 1e-6


def test_single_spin_oracle_static_limit():
    a = np.array([0.3, -1.2])
    seq = build_sequence("Ramsey", 4.0)
    np.testing.assert_allclose(_single_spin_coherence(a, seq, 0.0), np.cos(a * 4.0 / 2), rtol=1e-12)
    # flip-free Hahn refocuses completely
    np.testing.assert_allclose(_single_spin_coherence(a, build_sequence("Hahn", 4.0), 0.0), 1.0, rtol=1e-12)


def _overlap(h_breaks, flips, total):
    """int_0^total h(t) s(t) dt for signs starting at +1 and flipping at the given times."""
    cuts = sorted(set([0.0, total, *h_breaks, *flips]))
    acc = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        h = (-1) ** sum(1 for x in h_breaks if x <= mid)
        sgn = (-1) ** sum(1 for x in flips if x <= mid)
        acc += h * sgn * (hi - lo)
    return acc


@pytest.mark.parametrize("family,kw", [("Hahn", {}), ("DEER-echo", {"tau_offset": 2.0}), ("CPMG", {"n_pulses": 3})])
def test_single_spin_oracle_against_direct_simulation(family, kw):
    from spinbath.sequences import effective_modulation

    a, rate, t = 0.8, 1 / 6.0, 9.0
    seq = build_sequence(family, t, **kw)
    h_breaks = effective_modulation(seq).breakpoints
    rng = np.random.default_rng(0)
    n = 30_000
    cos = np.empty(n)
    for k in range(n):
        flips, w = [], rng.exponential(1 / rate)
        while w < t:
            flips.append(w)
            w += rng.exponential(1 / rate)
        s0 = 0.5 if rng.random() < 0.5 else -0.5
        cos[k] = math.cos(a * s0 * _overlap(h_breaks, flips, t))
    exact = _single_spin_coherence(np.array([a]), seq, rate)[0]
    assert abs(cos.mean() - exact) < 4 * cos.std() / math.sqrt(n)


def test_seed_determinism():
    seqs = [build_sequence("Hahn", 20.0), build_sequence("DEER", 10.0)]
    cfg = SimConfig(n_trials=300, rng_seed=42)
    a = simulate_sequences(seqs, SURFACE_BATH, SENSOR, cfg)
    b = simulate_sequences(seqs, SURFACE_BATH, SENSOR, cfg)
    assert a == b
    c = simulate_sequences(seqs, SURFACE_BATH, SENSOR, SimConfig(n_trials=300, rng_seed=43))
    assert a != c


def test_worker_count_invariance():
    seqs = [build_sequence("Hahn", 20.0)]
    ref = simulate_sequences(seqs, SURFACE_BATH, SENSOR, SimConfig(n_trials=700, rng_seed=5, workers=1))
    for w in (2, 3):
        got = simulate_sequences(seqs, SURFACE_BATH, SENSOR, SimConfig(n_trials=700, rng_seed=5, workers=w))
        assert got == ref


def test_worker_env_var(monkeypatch):
    seqs = [build_sequence("DEER", 12.0)]
    ref = simulate_sequences(seqs, SURFACE_BATH, SENSOR, SimConfig(n_trials=520, rng_seed=9))
    monkeypatch.setenv("SPINBATH_WORKERS", "4")
    assert simulate_sequences(seqs, SURFACE_BATH, SENSOR, SimConfig(n_trials=520, rng_seed=9)) == ref


def test_trial_prefix_stability():
    """Trial k draws from its own substream, so a longer run extends a shorter one."""
    seq = [build_sequence("Hahn", 20.0)]
    small = SimConfig(n_trials=1, rng_seed=11)
    one = simulate_sequences(seq, SURFACE_BATH, SENSOR, small)[0]
    many = simulate_curve("Hahn", [20.0], SURFACE_BATH, SENSOR, SimConfig(n_trials=1, rng_seed=11))
    assert many.values[0] == one.value
    assert many.uncertainty is None


def test_sin_component_vanishes():
    seqs = [build_sequence("Hahn", 30.0), build_sequence("DEER", 15.0), build_sequence("Ramsey", 5.0)]
    for est in simulate_sequences(seqs, SURFACE_BATH, SENSOR, SimConfig(n_trials=2000, rng_seed=3)):
        assert abs(est.sin_mean) < 3 * est.sin_stderr


def test_matches_exact_discrete_bath_for_sparse_surface_bath():
    seqs = [build_sequence("DEER", t) for t in (10.0, 20.0)] + [build_sequence("Hahn", t) for t in (20.0, 40.0)]
    est = simulate_sequences(seqs, SURFACE_BATH, SENSOR, SimConfig(n_trials=3000, rng_seed=17))
    for seq, e in zip(seqs, est):
        exact = poisson_bath_coherence(seq, SURFACE_BATH, SENSOR)
        assert abs(e.value - exact) < 4 * e.stderr, seq.label


def test_matches_analytic_in_gaussian_regime():
    seqs = [build_sequence("DEER", t) for t in (10.0, 20.0)] + [build_sequence("Hahn", t) for t in (20.0, 40.0)]
    cfg = SimConfig(n_trials=3000, disk_radius_factor=10, rng_seed=4)
    noise = OUNoise(GAUSS_BATH.b_rms, GAUSS_BATH.tau_c)
    for seq in seqs:
        assert gaussian_tag(seq, GAUSS_BATH, GAUSS_SENSOR, 10)
    for seq, e in zip(seqs, simulate_sequences(seqs, GAUSS_BATH, GAUSS_SENSOR, cfg)):
        assert abs(e.value - coherence(seq, noise)) < 4 * e.stderr + 0.005, seq.label


def test_paper_regime_is_tagged_non_gaussian():
    # near spins have a ~ kappa / d^3 ~ 0.3 rad/us, so a t >> 1 over the echo
    seq = build_sequence("Hahn", 40.0)
    assert not gaussian_tag(seq, SURFACE_BATH, SENSOR, 100, tol=0.02)


def test_stderr_scales_as_inverse_sqrt_n():
    bath = SpinBathParams(0.0025, 21.0).resolved(SENSOR)
    seq = [build_sequence("Hahn", 30.0)]
    ns = np.array([1_000, 10_000, 100_000])
    se = [simulate_sequences(seq, bath, SENSOR, SimConfig(n_trials=int(n), disk_radius_factor=10, rng_seed=1))[0].stderr
          for n in ns]
    slope = np.polyfit(np.log(ns), np.log(se), 1)[0]
    assert abs(slope / -0.5 - 1) < 0.2


def test_boundary_convergence():
    seq = build_sequence("Hahn", 20.0)
    e100 = simulate_coherence(seq, SURFACE_BATH, SENSOR, SimConfig(n_trials=1500, disk_radius_factor=100, rng_seed=2))
    e200 = simulate_coherence(seq, SURFACE_BATH, SENSOR, SimConfig(n_trials=1500, disk_radius_factor=200, rng_seed=2))
    # the exact discrete-bath value moves far less than one standard error
    x100 = poisson_bath_coherence(seq, SURFACE_BATH, SENSOR, radius_factor=100)
    x200 = poisson_bath_coherence(seq, SURFACE_BATH, SENSOR, radius_factor=200)
    assert abs(x200 - x100) < 0.1 * min(e100.stderr, e200.stderr)
    assert abs(e200.value - e100.value) < 3 * math.hypot(e100.stderr, e200.stderr)


def test_curve_and_sweep_wrappers():
    c = simulate_curve("Hahn", [0.0, 10.0, 20.0], SURFACE_BATH, SENSOR, SimConfig(n_trials=200, rng_seed=1))
    assert c.values[0] == 1.0 and c.uncertainty[0] == 0.0
    sw = simulate_tau_sweep(20.0, [0.0, 5.0, 10.0], SURFACE_BATH, SENSOR, SimConfig(n_trials=200, rng_seed=1))
    d = simulate_coherence(build_sequence("DEER", 20.0), SURFACE_BATH, SENSOR, SimConfig(n_trials=200, rng_seed=1))
    h = simulate_coherence(build_sequence("Hahn", 20.0), SURFACE_BATH, SENSOR, SimConfig(n_trials=200, rng_seed=1))
    # identical flip patterns with common random numbers give identical estimates
    assert sw.values[0] == pytest.approx(d.value, rel=1e-12)
    assert sw.values[-1] == pytest.approx(h.value, rel=1e-12)


def test_empty_bath_single_trial_is_one():
    c = simulate_curve("DEER", [1.0, 5.0], SpinBathParams(0.0, 5.0), SENSOR, SimConfig(n_trials=1))
    np.testing.assert_array_equal(c.values, 1.0)
