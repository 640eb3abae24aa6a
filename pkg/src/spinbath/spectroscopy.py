"""Noise-spectrum reconstruction from CPMG decays and double-Lorentzian fits.

Under the delta-filter approximation a CPMG-N decay at total time ``t`` probes
the spectrum at ``w0 = pi N / t`` with ``S(w0) = -ln C(t) * pi^2 / (4 t)``.
"""
from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import nnls
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import column, optional_sigma, xy
from .decoherence import OUNoise, chi_correlation
from .domain import CONSTANTS, CoherenceCurve, DomainError, FitResult, NoiseSpectrum, PhysicalConstants
from .fitting.lm import Objective, Tolerances, multistart

__all__ = [
    "ReconstructionError",
    "reconstruct_spectrum",
    "double_lorentzian",
    "double_lorentzian_integral",
    "fit_double_lorentzian",
    "normalize_by_fast_noise",
    "SpectrumReconstructor",
    "DoubleLorentzianFit",
]

EPS = 1e-3
ROUNDING = 1e-14
SATURATION = 1e-6


class ReconstructionError(DomainError):
    """No curve point lies in the informative coherence range."""


def _cpmg_count(curve: CoherenceCurve) -> int:
    spec = curve.sequence
    if spec.family == "Hahn":
        return 1
    if spec.family != "CPMG":
        raise DomainError(f"spectral decomposition needs CPMG curves, got {spec.label!r}")
    return spec.n_pulses


def reconstruct_spectrum(
    curves: Iterable[CoherenceCurve],
    eps: float = EPS,
    merge_rtol: float = 1e-6,
) -> NoiseSpectrum:
    """Delta-filter inversion of a family of CPMG decays.

    Points with ``C <= eps`` are dropped (the count is kept on the result);
    values above 1 are clipped to 1 and contribute zero. Probe frequencies
    that coincide within ``merge_rtol`` are merged by inverse-variance
    weighting, using the curves' uncertainties when present.
    """
    curves = list(curves)
    counts = {_cpmg_count(c) for c in curves}
    if len(counts) < 2:
        raise DomainError("need curves with at least two distinct pulse counts")
    w0, amp, var = [], [], []
    dropped = 0
    informative = 0
    t_lo, t_hi = math.inf, 0.0
    for c in curves:
        n = _cpmg_count(c)
        unc = c.uncertainty
        for i, (t, v) in enumerate(zip(c.times, c.values)):
            if t <= 0:
                continue
            t_lo, t_hi = min(t_lo, t), max(t_hi, t)
            if v <= eps:
                dropped += 1
                continue
            if v < 1 - SATURATION:
                informative += 1
            v = min(v, 1.0)
            factor = math.pi**2 / (4 * t)
            w0.append(math.pi * n / t)
            amp.append(-math.log(v) * factor)
            if unc is not None and unc[i] > 0:
                var.append((factor * unc[i] / v) ** 2)
            else:
                var.append(math.nan)
    if informative == 0:
        raise ReconstructionError(
            f"all points are saturated; usable coherence range is ({eps:g}, {1 - SATURATION:g}) "
            f"and the data span t in [{t_lo:g}, {t_hi:g}] us"
        )
    w0, amp, var = map(np.asarray, (w0, amp, var))
    # stable sort on (w0, amp) so input order cannot matter
    order = np.lexsort((amp, w0))
    w0, amp, var = w0[order], amp[order], var[order]
    have_var = np.all(np.isfinite(var))
    groups = np.split(np.arange(w0.size), np.flatnonzero(np.diff(w0) > merge_rtol * w0[1:]) + 1)
    out_w, out_s, out_u = [], [], []
    for g in groups:
        if have_var:
            wts = 1.0 / var[g]
            out_s.append(float(np.sum(wts * amp[g]) / np.sum(wts)))
            out_u.append(float(1.0 / math.sqrt(np.sum(wts))))
        else:
            out_s.append(float(np.mean(amp[g])))
        out_w.append(float(np.mean(w0[g])))
    return NoiseSpectrum(
        np.array(out_w), np.array(out_s), "reconstructed",
        uncertainty=np.array(out_u) if have_var else None, dropped=dropped,
    )


def double_lorentzian(omega, delta1, tau1, delta2, tau2):
    """``delta1^2 tau1 / (1 + (w tau1)^2) + delta2^2 tau2 / (1 + (w tau2)^2)``."""
    w = np.asarray(omega, dtype=float)
    return delta1**2 * tau1 / (1 + (w * tau1) ** 2) + delta2**2 * tau2 / (1 + (w * tau2) ** 2)


def double_lorentzian_integral(delta1, delta2) -> float:
    """``int_0^inf S dw = (pi/2)(delta1^2 + delta2^2)``."""
    return 0.5 * math.pi * (delta1**2 + delta2**2)


class DoubleLorentzianFit(RegressorMixin, BaseEstimator):
    """Two-component Lorentzian spectrum, slow component first (``tau1 > tau2``).

    Starting points come from a log grid of correlation-time pairs with the
    amplitudes solved by non-negative least squares; the best few seed the
    Levenberg-Marquardt refinement. Residuals are relative to the data.
    """

    def __init__(self, init=None, grid_size=14, n_starts=4, max_iter=400):
        self.init = init
        self.grid_size = grid_size
        self.n_starts = n_starts
        self.max_iter = max_iter

    def _starts(self, w, s, wts):
        if self.init is not None:
            return [tuple(float(v) for v in self.init)]
        taus = np.geomspace(0.1 / w[-1], 10.0 / w[0], self.grid_size)
        cands = []
        for i, t1 in enumerate(taus):
            for t2 in taus[:i]:
                basis = np.column_stack([t1 / (1 + (w * t1) ** 2), t2 / (1 + (w * t2) ** 2)])
                a, rnorm = nnls(basis * wts[:, None], s * wts)
                cands.append((rnorm, math.sqrt(a[0]), t1, math.sqrt(a[1]), t2))
        cands.sort()
        return [c[1:] for c in cands[: self.n_starts]]

    def fit(self, X, y, sigma=None):
        w, s, order = xy(X, y, min_samples=8)
        if w[0] <= 0:
            raise DomainError("frequencies must be positive")
        if w[-1] / w[0] < 10:
            raise DomainError("spectrum must span at least one decade in frequency")
        sig = optional_sigma(sigma, w.size)
        if sig is not None:
            wts = 1.0 / sig[order]
        else:
            floor = 1e-3 * np.median(np.abs(s[s != 0])) if np.any(s != 0) else 1.0
            wts = 1.0 / np.maximum(np.abs(s), floor)

        def residuals(q):
            return wts * (double_lorentzian(w, *q) - s)

        starts = self._starts(w, s, wts)
        scale = np.maximum(np.abs(np.array(starts[0], float)), 1e-12)
        obj = Objective(residuals, ("delta1", "tau1", "delta2", "tau2"),
                        lower=[-np.inf, 0.0, -np.inf, 0.0], upper=[np.inf] * 4,
                        x_scale=scale, absolute_sigma=sig is not None,
                        residual_floor=ROUNDING)
        res = multistart(obj, starts, Tolerances(max_iter=self.max_iter))
        p, e = dict(res.params), dict(res.stderr)
        p["delta1"], p["delta2"] = abs(p["delta1"]), abs(p["delta2"])
        # a component with amplitude consistent with zero has no meaningful tau; it goes second
        null1 = p["delta1"] <= 3 * e["delta1"] and p["delta2"] > 3 * e["delta2"]
        null2 = p["delta2"] <= 3 * e["delta2"] and p["delta1"] > 3 * e["delta1"]
        if null1 or (not null2 and p["tau2"] > p["tau1"]):
            p = {"delta1": p["delta2"], "tau1": p["tau2"], "delta2": p["delta1"], "tau2": p["tau1"]}
            e = {"delta1": e["delta2"], "tau1": e["tau2"], "delta2": e["delta1"], "tau2": e["tau1"]}
        self.result_ = FitResult(p, e, res.residual_norm, res.converged, res.iterations,
                                 res.grad_norm, res.gtol, res.message)
        self.params_ = (p["delta1"], p["tau1"], p["delta2"], p["tau2"])
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        return double_lorentzian(column(X), *self.params_)


def fit_double_lorentzian(spec: NoiseSpectrum, init: Optional[Sequence[float]] = None, **kwargs) -> FitResult:
    """Fit ``spec`` with two Lorentzians; see :class:`DoubleLorentzianFit`."""
    return DoubleLorentzianFit(init=init, **kwargs).fit(spec.omegas, spec.amplitudes, sigma=spec.uncertainty).result_


def _fast_pair(fast_params):
    if isinstance(fast_params, FitResult):
        return fast_params.params["delta2"], fast_params.params["tau2"]
    if isinstance(fast_params, dict):
        return fast_params["delta2"], fast_params["tau2"]
    delta, tau = fast_params
    return delta, tau


def normalize_by_fast_noise(
    curve: CoherenceCurve,
    fast_params,
    constants: PhysicalConstants = CONSTANTS,
) -> CoherenceCurve:
    """Remove the fast Lorentzian's decay: ``ln C_out = ln C_in + chi_fast(t)``.

    ``fast_params`` is a ``(delta, tau)`` pair, or a double-Lorentzian
    :class:`FitResult` whose second component is used.
    """
    delta, tau = _fast_pair(fast_params)
    noise = OUNoise.from_lorentzian(delta, tau, constants)
    chi = np.array([0.0 if t == 0 else chi_correlation(curve.sequence.build(t), noise, constants=constants)
                    for t in curve.times])
    factor = np.exp(chi)
    unc = None if curve.uncertainty is None else curve.uncertainty * factor
    return CoherenceCurve(curve.times, curve.values * factor, curve.sequence, unc, curve.seed)


class SpectrumReconstructor(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on a list of CPMG curves, ``transform`` to a spectrum.

    With ``fit_model=True`` a :class:`DoubleLorentzianFit` is also fitted and
    stored as ``model_``.
    """

    def __init__(self, eps=EPS, merge_rtol=1e-6, fit_model=False):
        self.eps = eps
        self.merge_rtol = merge_rtol
        self.fit_model = fit_model

    def fit(self, X, y=None):
        self.spectrum_ = reconstruct_spectrum(X, self.eps, self.merge_rtol)
        if self.fit_model:
            self.model_ = DoubleLorentzianFit().fit(
                self.spectrum_.omegas, self.spectrum_.amplitudes, sigma=self.spectrum_.uncertainty
            )
        return self

    def transform(self, X):
        check_is_fitted(self, "spectrum_")
        return reconstruct_spectrum(X, self.eps, self.merge_rtol)
