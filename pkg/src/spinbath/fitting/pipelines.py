"""Extraction pipelines: T2/p, coupling strength, and DEER-echo density/correlation time.

Every pipeline is an estimator with ``fit``/``predict`` and scikit-learn
parameter handling, plus a thin function that takes the package's own curve
types.
"""
from __future__ import annotations

import math
import warnings
from typing import NamedTuple, Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import column, optional_sigma, xy
from ..decoherence import OUNoise, deer_echo_chi, ou_phi, stretched_exp
from ..domain import (
    CONSTANTS,
    MAGIC_ANGLE,
    CoherenceCurve,
    DomainError,
    FitResult,
    NVSensor,
    SpinBathParams,
    TauSweep,
    brms_from_density,
)
from .lm import Objective, Tolerances, least_squares, multistart

__all__ = [
    "NonIdentifiableWarning",
    "DepthRequiredError",
    "StretchedExpFit",
    "CouplingStrengthFit",
    "DeerEchoFit",
    "extract_t2",
    "extract_coupling_strength",
    "extract_density_and_tauc",
    "T2Estimate",
    "CouplingEstimate",
    "DensityEstimate",
]

_CLIP = 1e-12
# residual std attributed to floating-point evaluation of the models
ROUNDING = 1e-14


class NonIdentifiableWarning(UserWarning):
    """The data window is too short to separate the fitted parameters."""


class DepthRequiredError(DomainError):
    """Density fits need a fixed sensor depth; density and depth are degenerate."""


DEPTH_MESSAGE = (
    "sensor depth is required: the bath field scales as sqrt(sigma)/depth^2, so density "
    "and depth cannot be fitted together (d sigma / sigma = -4 d depth / depth)"
)


def _weights(sigma, y):
    return np.ones_like(y) if sigma is None else 1.0 / sigma


class StretchedExpFit(RegressorMixin, BaseEstimator):
    """Fit ``C(t) = exp(-(t/T2)^p)`` with ``p`` confined to ``p_bounds``.

    Attributes
    ----------
    T2_ : float
        Coherence time in us.
    p_ : float
        Stretch exponent.
    result_ : FitResult
    """

    def __init__(self, p_bounds=(0.5, 4.0), p_starts=(1.0, 2.0, 3.0), max_iter=200):
        self.p_bounds = p_bounds
        self.p_starts = p_starts
        self.max_iter = max_iter

    @staticmethod
    def initial_t2(t, y):
        """Time at which the curve crosses 1/e, by linear interpolation."""
        target = math.exp(-1.0)
        below = np.flatnonzero(y <= target)
        if below.size and below[0] > 0:
            i = below[0]
            t0, t1, y0, y1 = t[i - 1], t[i], y[i - 1], y[i]
            return float(t0 + (target - y0) * (t1 - t0) / (y1 - y0)) if y1 != y0 else float(t1)
        if below.size:
            return float(t[0])
        # never decays to 1/e: extrapolate with a simple exponential from the last point
        last = max(-math.log(max(y[-1], _CLIP)), 1e-12)
        return float(t[-1] / last)

    def fit(self, X, y, sigma=None):
        t, c, order = xy(X, y, min_samples=6)
        sig = optional_sigma(sigma, t.size)
        sig = None if sig is None else sig[order]
        w = _weights(sig, c)
        lo, hi = self.p_bounds
        if np.ptp(c) < 1e-12 and np.all(np.abs(1 - c) < 1e-9):
            self.result_ = FitResult(
                {"T2": math.inf, "p": 1.0}, {"T2": math.inf, "p": math.inf},
                0.0, False, 0, message="flat curve: no decay to fit",
            )
            self.T2_, self.p_ = math.inf, 1.0
            return self
        t2_0 = self.initial_t2(t, c)

        def residuals(q):
            return w * (np.exp(-((t / q[0]) ** q[1])) - c)

        obj = Objective(residuals, ("T2", "p"), lower=(1e-12 * t2_0, lo), upper=(np.inf, hi),
                        x_scale=(t2_0, 1.0), absolute_sigma=sig is not None, residual_floor=ROUNDING)
        starts = [(t2_0, min(max(p, lo), hi)) for p in self.p_starts]
        res = multistart(obj, starts, Tolerances(max_iter=self.max_iter))
        self.result_ = res
        self.T2_, self.p_ = res.params["T2"], res.params["p"]
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        return stretched_exp(column(X), self.T2_, self.p_)


class T2Estimate(NamedTuple):
    T2: float
    p: float
    result: FitResult


def extract_t2(curve: CoherenceCurve, **kwargs) -> T2Estimate:
    """Stretched-exponential coherence time of a measured or simulated curve."""
    fit = StretchedExpFit(**kwargs).fit(curve.times, curve.values, sigma=curve.uncertainty)
    return T2Estimate(fit.T2_, fit.p_, fit.result_)


class CouplingStrengthFit(RegressorMixin, BaseEstimator):
    """Fit a DEER decay ``C(t) = A exp(-K tau_c (exp(-t/tau_c) + t/tau_c - 1))``.

    ``K = gamma^2 B_rms^2 tau_c`` is the long-time decay rate. It is kept in 1/us
    internally; ``coupling_khz_`` reports it in kHz.
    """

    def __init__(self, fit_amplitude=False, identifiable_ratio=0.1, max_iter=300):
        self.fit_amplitude = fit_amplitude
        self.identifiable_ratio = identifiable_ratio
        self.max_iter = max_iter

    @staticmethod
    def _unit_chi(t, tau_c):
        return tau_c * ou_phi(t / tau_c)

    def initial_guesses(self, t, c):
        """Candidate (K, tau_c) pairs from the short- and long-time shape of ``-ln C``."""
        chi = -np.log(np.clip(c, _CLIP, None))
        third = max(2, t.size // 3)
        quad = np.median(chi[:third] / t[:third] ** 2)  # K / (2 tau_c)
        slope = np.polyfit(t[-third:], chi[-third:], 1)[0]  # K once t >> tau_c
        taus = [t[-1] / 2, t[-1], 3 * t[-1], 10 * t[-1]]
        if quad > 0 and slope > 0:
            taus.insert(0, float(np.clip(slope / (2 * quad), t[0] / 10, 100 * t[-1])))
        out = []
        for tau_c in taus:
            basis = self._unit_chi(t, tau_c)
            k = max(float(basis @ chi / (basis @ basis)), 0.0)
            out.append((k, tau_c))
        return out

    def fit(self, X, y, sigma=None):
        t, c, order = xy(X, y, min_samples=4)
        sig = optional_sigma(sigma, t.size)
        sig = None if sig is None else sig[order]
        w = _weights(sig, c)
        names = ("K", "tau_c") + (("amplitude",) if self.fit_amplitude else ())

        def residuals(q):
            amp = q[2] if self.fit_amplitude else 1.0
            return w * (amp * np.exp(-q[0] * self._unit_chi(t, q[1])) - c)

        guesses = self.initial_guesses(t, c)
        scale_k = max(max(g[0] for g in guesses), 1e-9)
        lower = [0.0, 1e-6 * t[-1]] + ([0.0] if self.fit_amplitude else [])
        upper = [np.inf, 1e6 * t[-1]] + ([np.inf] if self.fit_amplitude else [])
        scale = [scale_k, t[-1]] + ([1.0] if self.fit_amplitude else [])
        obj = Objective(residuals, names, lower, upper, scale, absolute_sigma=sig is not None,
                        residual_floor=ROUNDING)
        starts = [g + ((1.0,) if self.fit_amplitude else ()) for g in guesses]
        res = multistart(obj, starts, Tolerances(max_iter=self.max_iter))
        self.tau_c_ = res.params["tau_c"]
        self.coupling_ = res.params["K"]
        self.amplitude_ = res.params.get("amplitude", 1.0)
        self.identifiable_ = bool(t[-1] >= self.identifiable_ratio * self.tau_c_) or self.coupling_ == 0
        notes = ()
        if not self.identifiable_:
            msg = (f"t_max={t[-1]:.3g} us is much shorter than the fitted tau_c={self.tau_c_:.3g} us; "
                   "K and tau_c are poorly separated")
            warnings.warn(msg, NonIdentifiableWarning, stacklevel=2)
            notes = (msg,)
        self.result_ = FitResult(
            res.params, res.stderr, res.residual_norm, res.converged, res.iterations,
            res.grad_norm, res.gtol, res.message, res.covariance, notes,
        )
        self.noise_ = OUNoise.from_coupling(self.coupling_, self.tau_c_)
        return self

    @property
    def coupling_khz_(self):
        return 1e3 * self.coupling_

    def predict(self, X):
        check_is_fitted(self, "result_")
        t = column(X)
        return self.amplitude_ * np.exp(-self.coupling_ * self._unit_chi(t, self.tau_c_))


class CouplingEstimate(NamedTuple):
    coupling_khz: float
    stderr_khz: float
    result: FitResult


def extract_coupling_strength(
    deer_curve: CoherenceCurve,
    normalized: bool = False,
    fast_params=None,
    **kwargs,
) -> CouplingEstimate:
    """Coupling strength ``K`` (kHz) from a DEER decay.

    If ``fast_params`` (``(delta, tau)`` of the fast Lorentzian) is given the
    curve is first divided by the fast-noise decay. ``normalized`` only records
    that the caller already did so.
    """
    if fast_params is not None:
        from ..spectroscopy import normalize_by_fast_noise

        deer_curve = normalize_by_fast_noise(deer_curve, fast_params)
        normalized = True
    fit = CouplingStrengthFit(**kwargs).fit(deer_curve.times, deer_curve.values, sigma=deer_curve.uncertainty)
    res = fit.result_
    if normalized:
        res = FitResult(res.params, res.stderr, res.residual_norm, res.converged, res.iterations,
                        res.grad_norm, res.gtol, res.message, res.covariance,
                        res.warnings + ("input normalised by fast noise",))
    return CouplingEstimate(fit.coupling_khz_, 1e3 * res.stderr["K"], res)


class DeerEchoFit(RegressorMixin, BaseEstimator):
    """Fit a DEER-echo offset sweep for bath density and correlation time.

    ``X`` holds bath-flip offsets ``tau`` in us at the fixed echo time
    ``total_time``. The sensor depth is a fixed input; the bath field follows
    from the density through :func:`~spinbath.domain.brms_from_density`.
    """

    def __init__(self, total_time=None, depth=None, axis_polar_angle=MAGIC_ANGLE,
                 fit_amplitude=False, tau_c_starts=(0.25, 0.5, 1.0, 2.0, 4.0), max_iter=300):
        self.total_time = total_time
        self.depth = depth
        self.axis_polar_angle = axis_polar_angle
        self.fit_amplitude = fit_amplitude
        self.tau_c_starts = tau_c_starts
        self.max_iter = max_iter

    def _sensor(self):
        if self.depth is None:
            raise DepthRequiredError(DEPTH_MESSAGE)
        return NVSensor(depth=self.depth, axis_polar_angle=self.axis_polar_angle)

    def _unit_chi(self, taus, tau_c, sensor):
        # exponent per unit density: chi is linear in sigma
        b1 = brms_from_density(SpinBathParams(1.0, tau_c), sensor)
        return deer_echo_chi(taus, self.total_time, OUNoise(b1, tau_c))

    def fit(self, X, y, sigma=None):
        sensor = self._sensor()
        if self.total_time is None or not self.total_time > 0:
            raise DomainError("total_time (echo time, us) must be given")
        taus, c, order = xy(X, y, min_samples=4)
        sig = optional_sigma(sigma, taus.size)
        sig = None if sig is None else sig[order]
        w = _weights(sig, c)
        T = float(self.total_time)
        tol = 1e-9 * T
        if taus[0] > tol or taus[-1] < T / 2 - tol:
            raise DomainError("the tau grid must include both endpoints 0 and total_time/2")
        chi = -np.log(np.clip(c, _CLIP, None))
        guesses = []
        for f in self.tau_c_starts:
            tau_c = f * T
            basis = self._unit_chi(taus, tau_c, sensor)
            s0 = max(float(basis @ chi / (basis @ basis)), 0.0)
            cost = float(np.sum((np.exp(-s0 * basis) - c) ** 2))
            guesses.append((cost, s0, tau_c))
        guesses.sort()
        names = ("sigma", "tau_c") + (("amplitude",) if self.fit_amplitude else ())

        def residuals(q):
            amp = q[2] if self.fit_amplitude else 1.0
            return w * (amp * np.exp(-q[0] * self._unit_chi(taus, q[1], sensor)) - c)

        s_scale = max(max(g[1] for g in guesses), 1e-6)
        extra = 1 if self.fit_amplitude else 0
        obj = Objective(
            residuals, names,
            lower=[0.0, 1e-4 * T] + [0.0] * extra,
            upper=[np.inf, 1e5 * T] + [np.inf] * extra,
            x_scale=[s_scale, T] + [1.0] * extra,
            absolute_sigma=sig is not None,
            residual_floor=ROUNDING,
        )
        starts = [(g[1], g[2]) + ((1.0,) if self.fit_amplitude else ()) for g in guesses[:4]]
        res = multistart(obj, starts, Tolerances(max_iter=self.max_iter))
        self.result_ = res
        self.sensor_ = sensor
        self.sigma_ = res.params["sigma"]
        self.tau_c_ = res.params["tau_c"]
        self.amplitude_ = res.params.get("amplitude", 1.0)
        self.b_rms_ = brms_from_density(SpinBathParams(self.sigma_, self.tau_c_), sensor)
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        taus = column(X)
        return self.amplitude_ * np.exp(-self.sigma_ * self._unit_chi(taus, self.tau_c_, self.sensor_))


class DensityEstimate(NamedTuple):
    sigma: float
    tau_c: float
    result: FitResult


def extract_density_and_tauc(sweep: TauSweep, sensor: Optional[NVSensor], **kwargs) -> DensityEstimate:
    """Bath density (nm^-2) and correlation time (us) from a DEER-echo sweep."""
    if sensor is None:
        raise DepthRequiredError(DEPTH_MESSAGE)
    fit = DeerEchoFit(total_time=sweep.total_time, depth=sensor.depth,
                      axis_polar_angle=sensor.axis_polar_angle, **kwargs)
    fit.fit(sweep.taus, sweep.values, sigma=sweep.uncertainty)
    return DensityEstimate(fit.sigma_, fit.tau_c_, fit.result_)
