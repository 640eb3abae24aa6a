import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spinbath.domain import DomainError
from spinbath.sequences import (
    SequenceSpec,
    bath_modulation,
    build_sequence,
    effective_modulation,
    filter_function,
    filter_function_closed_form,
    filter_function_quadrature,
    parse_label,
    sensor_modulation,
)


def test_parse_label():
    assert parse_label("CPMG-8") == ("CPMG", 8)
    assert parse_label("Hahn") == ("Hahn", 1)
    with pytest.raises(DomainError, match="unknown sequence family"):
        parse_label("XY-4")


def test_canonical_flip_sets():
    t = 12.0
    assert build_sequence("Ramsey", t).sensor_flips == ()
    assert build_sequence("Hahn", t).sensor_flips == (6.0,)
    assert build_sequence("CPMG-2", t).sensor_flips == (3.0, 9.0)
    assert build_sequence("CPMG", t, 4).sensor_flips == (1.5, 4.5, 7.5, 10.5)
    d = build_sequence("DEER", t)
    assert d.sensor_flips == (6.0,) and d.bath_flips == (6.0,)
    e = build_sequence("DEER-echo", t, tau_offset=2.0)
    assert e.sensor_flips == (6.0,) and e.bath_flips == (8.0,)


def test_cpmg_flip_formula_general():
    for n in (1, 3, 7, 32):
        s = build_sequence("CPMG", 10.0, n)
        np.testing.assert_allclose(s.sensor_flips, [10.0 * (2 * k - 1) / (2 * n) for k in range(1, n + 1)])


def test_deer_echo_zero_offset_equals_deer():
    a = build_sequence("DEER-echo", 20.0, tau_offset=0.0)
    b = build_sequence("DEER", 20.0)
    assert a.sensor_flips == b.sensor_flips and a.bath_flips == b.bath_flips


def test_deer_echo_end_flip_is_inert():
    e = build_sequence("DEER-echo", 20.0, tau_offset=10.0)
    assert e.bath_flips == (20.0,)
    h = build_sequence("Hahn", 20.0)
    m1, m2 = effective_modulation(e), effective_modulation(h)
    assert m1.breakpoints == m2.breakpoints


@pytest.mark.parametrize("tau", [-0.1, 10.01])
def test_deer_echo_offset_out_of_range(tau):
    with pytest.raises(DomainError, match="tau_offset"):
        build_sequence("DEER-echo", 20.0, tau_offset=tau)


def test_unknown_family_and_bad_inputs():
    with pytest.raises(DomainError):
        build_sequence("Carr", 1.0)
    with pytest.raises(DomainError):
        build_sequence("Hahn", 0.0)
    with pytest.raises(DomainError):
        build_sequence("CPMG", 1.0, -1)
    with pytest.raises(DomainError):
        build_sequence("CPMG-2", 1.0, 3)


def test_coincident_flips_cancel():
    s = build_sequence("custom", 10.0, sensor_flips=[2.0, 5.0], bath_flips=[3.0, 3.0, 7.0])
    assert s.bath_flips == (7.0,)
    s = build_sequence("custom", 10.0, sensor_flips=[4.0, 4.0 + 1e-13])
    assert s.sensor_flips == ()


def test_modulation_examples():
    h = sensor_modulation(build_sequence("Hahn", 10.0))
    np.testing.assert_array_equal(h([0.0, 4.9, 5.0, 10.0]), [1, 1, -1, -1])
    r = sensor_modulation(build_sequence("Ramsey", 10.0))
    np.testing.assert_array_equal(r(np.linspace(0, 10, 7)), np.ones(7))
    c1 = build_sequence("CPMG-1", 10.0)
    assert sensor_modulation(c1).breakpoints == h.breakpoints


def test_bath_sign_and_negation():
    b = bath_modulation(build_sequence("DEER", 10.0))
    assert b.initial_sign == 1 and b.breakpoints == (5.0,)
    neg = bath_modulation(build_sequence("DEER", 10.0), initial_sign=-1)
    np.testing.assert_array_equal(neg([1.0, 6.0]), -b([1.0, 6.0]))


def test_filter_function_examples():
    assert filter_function(build_sequence("Ramsey", 1.0), math.pi) == pytest.approx(2.0, rel=1e-12)
    assert filter_function(build_sequence("Hahn", 1.0), 2 * math.pi) == pytest.approx(8.0, rel=1e-12)
    assert filter_function(build_sequence("Hahn", 10.0), 2 * math.pi / 10) == pytest.approx(8.0, rel=1e-12)


def test_hahn_closed_form_matches_quadrature():
    s = build_sequence("Hahn", 1.0)
    for wt in (0.3, 2 * math.pi, 17.0):
        closed = 8 * math.sin(wt / 4) ** 4
        assert filter_function_quadrature(s, wt) == pytest.approx(closed, rel=1e-10)


def test_filter_rejects_nonpositive_omega():
    with pytest.raises(DomainError):
        filter_function(build_sequence("Hahn", 1.0), 0.0)
    with pytest.raises(DomainError):
        filter_function(build_sequence("Hahn", 1.0), [-1.0, 1.0])


def test_echo_filter_vanishes_as_omega_to_the_fourth():
    s = build_sequence("Hahn", 1.0)
    w = np.array([1e-3, 2e-3])
    f = filter_function(s, w)
    assert f[1] / f[0] == pytest.approx(16.0, rel=1e-4)
    assert f[0] < 1e-12


@pytest.mark.parametrize("family", ["Ramsey", "Hahn", "CPMG-2", "CPMG-5", "CPMG-16"])
def test_closed_form_vs_quadrature_grid(family):
    s = build_sequence(family, 1.0)
    for wt in np.geomspace(1e-2, 1e3, 25):
        q = filter_function_quadrature(s, wt)
        c = filter_function_closed_form(s, wt)
        assert c == pytest.approx(q, rel=1e-8, abs=1e-300)


@pytest.mark.parametrize("n", [4, 8, 16, 32])
def test_cpmg_peak_position(n):
    t = 1.0
    w = np.linspace(0.5 * math.pi * n, 1.5 * math.pi * n, 20001)
    f = filter_function(build_sequence("CPMG", t, n), w) / w**2
    w_peak = w[np.argmax(f)]
    assert abs(w_peak / (math.pi * n / t) - 1) < 0.05


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=0, max_size=6, unique=True),
       st.floats(0.1, 50.0))
def test_exact_filter_matches_quadrature(flips, wt):
    s = build_sequence("custom", 1.0, sensor_flips=sorted(flips))
    assert filter_function(s, wt) == pytest.approx(filter_function_quadrature(s, wt), rel=1e-7, abs=1e-10)


def test_sequence_spec_rebuild():
    spec = SequenceSpec("DEER-echo", tau_fraction=0.25)
    assert spec.build(20.0).bath_flips == (15.0,)
    assert SequenceSpec("CPMG-4").label == "CPMG-4"
    with pytest.raises(DomainError):
        SequenceSpec("DEER-echo", tau_offset=1.0, tau_fraction=0.1)
