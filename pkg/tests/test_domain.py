import math

import numpy as np
import pytest

from spinbath.domain import (
    CONSTANTS,
    MAGIC_ANGLE,
    CoherenceCurve,
    DomainError,
    FitResult,
    NoiseSpectrum,
    NVSensor,
    PhysicalConstants,
    PulseSequence,
    SpinBathParams,
    TauSweep,
    angular_factor,
    brms_from_density,
    dipolar_prefactor,
)
from spinbath.montecarlo import dipolar_variance_oracle
from spinbath.sequences import SequenceSpec

# Brute-force dipolar sum: 2e6 stratified positions on a disk of radius 100 d,
# sigma = 0.0025 nm^-2, d = 10 nm, magic-angle axis, seed 0. Frozen before use.
GOLDEN_BRMS_T = 5.037465529415718e-07
GOLDEN_BRMS_SE_T = 3.2e-10


def test_constants_defaults_and_immutability():
    c = PhysicalConstants()
    assert c.gamma_e == 2.8024953e10
    assert c.mu0_over_4pi == 1e-7
    assert c.hbar == 1.054571817e-34
    with pytest.raises(Exception):
        c.gamma_e = 1.0
    assert c.gamma_mhz_per_gauss == pytest.approx(2.8024953)


@pytest.mark.parametrize("field", ["gamma_e", "mu0_over_4pi", "hbar"])
def test_constants_reject_nonpositive(field):
    with pytest.raises(DomainError, match=field):
        PhysicalConstants(**{field: 0.0})


def test_dipolar_prefactor_value():
    # mu0/4pi * gamma^2 * hbar for two free electrons, rad/us nm^3
    assert dipolar_prefactor() == pytest.approx(326.98, rel=1e-4)


def test_sensor_validation():
    with pytest.raises(DomainError, match="depth"):
        NVSensor(depth=0)
    with pytest.raises(DomainError, match="axis_polar_angle"):
        NVSensor(axis_polar_angle=2.0)
    with pytest.raises(DomainError, match="bias_field"):
        NVSensor(bias_field=-1)
    assert NVSensor().axis_polar_angle == pytest.approx(math.radians(54.7356), abs=1e-6)
    np.testing.assert_allclose(np.linalg.norm(NVSensor().axis), 1.0)


def test_bath_validation_and_cache():
    with pytest.raises(DomainError, match="sigma"):
        SpinBathParams(-1, 1)
    with pytest.raises(DomainError, match="tau_c"):
        SpinBathParams(0.1, 0)
    with pytest.raises(DomainError, match="b_rms"):
        SpinBathParams(0.1, 1, b_rms=-1)
    b = SpinBathParams(0.0025, 21).resolved(NVSensor())
    assert b.b_rms == brms_from_density(b, NVSensor())
    assert b.resolved(NVSensor(depth=3)) is b


def test_empty_bath_gives_zero_field():
    assert brms_from_density(SpinBathParams(0.0, 1.0), NVSensor()) == 0.0


@pytest.mark.parametrize("k", [0.5, 2.0, 10.0])
def test_density_depth_scaling_symmetry(k):
    # b_rms ~ sqrt(sigma) / d^2, so sigma / d^4 is the invariant combination
    a = brms_from_density(SpinBathParams(0.0025, 1), NVSensor(depth=10))
    b = brms_from_density(SpinBathParams(k**4 * 0.0025, 1), NVSensor(depth=10 * k))
    assert b == pytest.approx(a, rel=1e-13)


@pytest.mark.parametrize("k", [0.5, 2.0, 10.0])
def test_sqrt_sigma_over_depth_squared(k):
    a = brms_from_density(SpinBathParams(0.0025, 1), NVSensor(depth=10))
    assert brms_from_density(SpinBathParams(k * k * 0.0025, 1), NVSensor(depth=10)) == pytest.approx(k * a, rel=1e-13)
    assert brms_from_density(SpinBathParams(0.0025, 1), NVSensor(depth=10 * k)) == pytest.approx(a / k**2, rel=1e-13)


def test_four_sigma_two_depth_halves_field():
    a = brms_from_density(SpinBathParams(0.0025, 1), NVSensor(depth=10))
    b = brms_from_density(SpinBathParams(0.01, 1), NVSensor(depth=20))
    assert b == pytest.approx(a / 2, rel=1e-14)


def test_brms_monotone_in_density():
    s = NVSensor()
    vals = [brms_from_density(SpinBathParams(x, 1), s) for x in np.linspace(0, 0.01, 21)]
    assert np.all(np.diff(vals) >= 0)


def test_angular_factor_limits():
    assert angular_factor(0.0) == pytest.approx(0.75)
    assert angular_factor(MAGIC_ANGLE) == pytest.approx(0.375)
    assert angular_factor(math.pi / 2) == pytest.approx(9 / 32)


def test_golden_brms_is_reproduced_by_oracle():
    value, se = dipolar_variance_oracle(0.0025, NVSensor(depth=10.0, axis_polar_angle=MAGIC_ANGLE))
    assert value == GOLDEN_BRMS_T
    assert se == pytest.approx(GOLDEN_BRMS_SE_T, rel=0.01)


def test_closed_form_matches_golden_brms():
    b = brms_from_density(SpinBathParams(0.0025, 21.0), NVSensor())
    assert abs(b - GOLDEN_BRMS_T) < 3 * GOLDEN_BRMS_SE_T


def test_closed_form_matches_oracle_off_magic_angle():
    s = NVSensor(depth=7.0, axis_polar_angle=0.2)
    value, se = dipolar_variance_oracle(0.004, s, n_samples=400_000, seed=3)
    b = brms_from_density(SpinBathParams(0.004, 1.0), s)
    assert abs(b - value) < 4 * se


def test_pulse_sequence_invariants():
    PulseSequence(10.0, (5.0,), (5.0, 10.0), "custom")
    with pytest.raises(DomainError):
        PulseSequence(0.0, (), (), "Ramsey")
    with pytest.raises(DomainError):
        PulseSequence(10.0, (6.0, 5.0), (), "custom")
    with pytest.raises(DomainError):
        PulseSequence(10.0, (10.0,), (), "custom")
    with pytest.raises(DomainError):
        PulseSequence(10.0, (), (0.0,), "custom")
    with pytest.raises(DomainError):
        PulseSequence(10.0, (3.0,), (), "Hahn")  # label inconsistent with flips


def test_curve_invariants():
    spec = SequenceSpec("Hahn")
    c = CoherenceCurve([1, 2, 3], [0.9, 0.8, 0.7], spec, [0.01] * 3)
    with pytest.raises(ValueError):
        c.values[0] = 1.0  # read-only
    with pytest.raises(DomainError):
        CoherenceCurve([1, 1, 3], [0.9, 0.8, 0.7], spec)
    with pytest.raises(DomainError):
        CoherenceCurve([1, 2], [0.9, 0.8, 0.7], spec)
    with pytest.raises(DomainError):
        CoherenceCurve([1, 2, 3], [0.9, 0.8, 0.7], spec, [0.1, 0.1])


def test_sweep_and_spectrum_invariants():
    TauSweep([0, 5, 10], [0.3, 0.5, 0.8], 20.0)
    with pytest.raises(DomainError):
        TauSweep([0, 5, 11], [0.3, 0.5, 0.8], 20.0)
    NoiseSpectrum([0.1, 1.0], [1.0, 0.5], "model")
    with pytest.raises(DomainError):
        NoiseSpectrum([0.0, 1.0], [1.0, 0.5], "model")
    with pytest.raises(DomainError):
        NoiseSpectrum([1.0, 0.5], [1.0, 0.5], "model")


def test_fit_result_invariants():
    FitResult({"a": 1.0}, {"a": 0.1}, 0.0, True, 2, grad_norm=0.0, gtol=1e-8)
    with pytest.raises(DomainError):
        FitResult({"a": 1.0}, {"a": -0.1}, 0.0, False, 2)
    with pytest.raises(DomainError):
        FitResult({"a": 1.0}, {"a": 0.1}, 0.0, False, -1)
    with pytest.raises(DomainError):
        FitResult({"a": 1.0}, {"a": 0.1}, 0.0, True, 2, grad_norm=1.0, gtol=1e-8)
