"""Shared oracles for the test suite.

These are deliberately written against the defining integrals rather than the
package's closed forms, so agreement is a genuine cross-check.
"""
import math

import numpy as np
import pytest
from scipy import integrate

from spinbath.domain import CONSTANTS


def sign_pattern(sensor_flips, bath_flips, total):
    """Sign of f(t) g(t) on each piece between all flips (no cancellation logic)."""
    edges = sorted(set([0.0, total, *sensor_flips, *[b for b in bath_flips if b < total]]))
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (a + b)
        f = (-1) ** sum(1 for s in sensor_flips if s <= mid)
        g = (-1) ** sum(1 for s in bath_flips if s <= mid)
        out.append((a, b, f * g))
    return out


def chi_double_quadrature(sensor_flips, bath_flips, total, b_rms, tau_c):
    """(gamma^2/2) int int h h' b^2 exp(-|t1-t2|/tau_c) by adaptive 2-d quadrature.

    Each rectangle of constant sign is integrated separately; rectangles on the
    diagonal are split into two triangles so the kink at t1 = t2 never sits
    inside an integration cell.
    """
    pieces = sign_pattern(sensor_flips, bath_flips, total)
    kern = lambda t2, t1: math.exp(-abs(t1 - t2) / tau_c)
    acc = 0.0
    opts = dict(epsabs=0.0, epsrel=1e-12)
    for i, (a1, b1, s1) in enumerate(pieces):
        for j, (a2, b2, s2) in enumerate(pieces):
            if i == j:
                # lower triangle t2 < t1, doubled by symmetry
                val = 2 * integrate.dblquad(kern, a1, b1, lambda t1: a1, lambda t1: t1, **opts)[0]
            else:
                val = integrate.dblquad(kern, a1, b1, a2, b2, **opts)[0]
            acc += s1 * s2 * val
    return 0.5 * (CONSTANTS.gamma_angular * b_rms) ** 2 * acc


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
