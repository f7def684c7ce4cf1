"""Weighted nonlinear least-squares fits of line scans, saturation curves and g2.

All fits use damped least squares (MINPACK Levenberg-Marquardt through
:func:`scipy.optimize.least_squares`) with analytic Jacobians. Positive
parameters are fitted as logarithms. Each fit is started from a heuristic
guess and two perturbed copies; the lowest-cost solution wins and a
``multimodal`` flag records whether the starts disagreed.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from . import kernels
from .errors import (
    ConvergenceError,
    DataError,
    DegenerateDataError,
    DomainError,
    InsufficientDataError,
    InsufficientSaturationError,
    NumericalError,
    ZplQeError,
)
from .simulator import PS_PER_S, make_rng

__all__ = [
    "LineScan",
    "LineFit",
    "SaturationFit",
    "G2Histogram",
    "G2Fit",
    "lorentzian",
    "fit_lorentzian",
    "fit_saturation",
    "autocorrelation_histogram",
    "fit_g2",
    "bootstrap_uncertainty",
]

_logger = logging.getLogger(__name__)

_TOL = dict(ftol=1e-15, xtol=1e-15, gtol=1e-15)
# Relative parameter distance beyond which two multistart optima count as distinct.
_DISTINCT = 1e-6


@dataclass
class LineScan:
    """One single-power slice of a scan series, already dead-time corrected.

    ``rate`` and ``sigma`` are in counts/s, ``detuning`` in rad/s.
    """

    detuning: np.ndarray
    rate: np.ndarray
    sigma: np.ndarray
    source_power: float = float("nan")

    def __post_init__(self):
        self.detuning = np.asarray(self.detuning, dtype=float)
        self.rate = np.asarray(self.rate, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if not (self.detuning.shape == self.rate.shape == self.sigma.shape):
            raise DomainError("detuning, rate and sigma must have equal shape")
        if np.any(self.sigma <= 0):
            raise DomainError("sigma must be positive")


@dataclass
class LineFit:
    amplitude: float
    center: float
    fwhm: float
    background: float
    covariance: np.ndarray
    residual_norm: float
    converged: bool = True
    multimodal: bool = False

    @property
    def errors(self):
        return np.sqrt(np.diag(self.covariance))

    @property
    def params(self):
        return np.array([self.amplitude, self.center, self.fwhm, self.background])


@dataclass
class SaturationFit:
    f_inf: float
    p_sat: float
    gamma_tot0: float
    f_inf_err: float
    p_sat_err: float
    gamma_tot0_err: float
    covariance: np.ndarray
    log_covariance: np.ndarray
    residual_norm: float
    max_sat_param: float
    converged: bool = True
    multimodal: bool = False

    @property
    def params(self):
        return np.array([self.f_inf, self.p_sat, self.gamma_tot0])


@dataclass
class G2Histogram:
    tau: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    counts: np.ndarray
    bin_width: float
    n1: int
    n2: int
    duration: float
    zero_bin_divergent: bool = False


@dataclass
class G2Fit:
    lam1: float
    lam1_err: float
    bunch_amplitude: float
    bunch_amplitude_err: float
    bunch_rate: float
    bunch_rate_err: float
    gamma_tot: float
    gamma_tot_err: float
    residual_norm: float
    bunching_unconstrained: bool = False
    antibunching_unconstrained: bool = False
    flags: list = field(default_factory=list)


def lorentzian(detuning, amplitude, center, fwhm, background):
    u = 2.0 * (np.asarray(detuning, dtype=float) - center) / fwhm
    return background + amplitude / (1.0 + u * u)


def _covariance(jac):
    """Inverse Fisher matrix from a residual Jacobian, pseudo-inverse if singular."""
    fisher = jac.T @ jac
    try:
        cov = np.linalg.inv(fisher)
        if not np.all(np.isfinite(cov)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(fisher)
    return 0.5 * (cov + cov.T)


def _multistart(fun, jac, starts, method="lm", bounds=(-np.inf, np.inf), max_nfev=None):
    """Run ``least_squares`` from each start, return (best, multimodal)."""
    results = []
    for x0 in starts:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                res = least_squares(
                    fun, x0, jac=jac, method=method, bounds=bounds, max_nfev=max_nfev, **_TOL
                )
        except (ValueError, np.linalg.LinAlgError, FloatingPointError):
            continue
        if res.status > 0 and np.all(np.isfinite(res.x)) and np.isfinite(res.cost):
            results.append(res)
    if not results:
        raise ConvergenceError("least-squares fit failed to converge from every start")
    best = min(results, key=lambda r: r.cost)
    scale = np.maximum(np.abs(best.x), 1.0)
    multimodal = any(
        np.max(np.abs(r.x - best.x) / scale) > _DISTINCT and r.cost > best.cost * (1 + 1e-9)
        for r in results
    )
    return best, multimodal


def _half_max_width(x, y, background):
    i = int(np.argmax(y))
    half = background + 0.5 * (y[i] - background)
    left = i
    while left > 0 and y[left] > half:
        left -= 1
    right = i
    while right < len(y) - 1 and y[right] > half:
        right += 1
    if left == i or right == i or y[left] > half or y[right] > half:
        return None

    def cross(j0, j1):
        y0, y1 = y[j0], y[j1]
        if y1 == y0:
            return x[j0]
        return x[j0] + (half - y0) * (x[j1] - x[j0]) / (y1 - y0)

    return cross(right - 1, right) - cross(left, left + 1)


def fit_lorentzian(scan, multistart=True):
    """Fit ``b + a / (1 + (2 (x - x0) / w)^2)`` to a dead-time corrected line scan.

    Parameters
    ----------
    scan : LineScan
    multistart : bool
        Also start from half and double the heuristic linewidth.

    Returns
    -------
    LineFit
        ``covariance`` is ordered (amplitude, center, fwhm, background).

    Raises
    ------
    DegenerateDataError
        Flat scans, fewer than 8 points, or scans narrower than two linewidths.
    ConvergenceError
    """
    x, y, s = scan.detuning, scan.rate, scan.sigma
    if x.size < 8:
        raise DegenerateDataError(f"line fit needs at least 8 points, got {x.size}")
    if np.ptp(y) <= 0:
        raise DegenerateDataError("flat scan: no line to fit")
    order = np.argsort(x)
    x, y, s = x[order], y[order], s[order]

    # Work in units of the data: rate / y_max, detuning relative to the peak in units of w0.
    b0 = float(np.percentile(y, 25))
    i_peak = int(np.argmax(y))
    a0 = float(y[i_peak] - b0)
    if a0 <= 0:
        raise DegenerateDataError("no peak above the background level")
    w0 = _half_max_width(x, y, b0)
    span = float(x[-1] - x[0])
    if w0 is None or not w0 > 0:
        w0 = span / 4.0
    if span < 2.0 * w0:
        raise DegenerateDataError("scan spans fewer than two linewidths")
    xc = float(x[i_peak])
    ys = float(y[i_peak])
    xn = (x - xc) / w0
    yn = y / ys
    sn = s / ys

    def model_and_jac(q):
        la, c, lw, b = q
        a, w = math.exp(la), math.exp(lw)
        u = 2.0 * (xn - c) / w
        lor = 1.0 / (1.0 + u * u)
        m = b + a * lor
        j = np.empty((xn.size, 4))
        j[:, 0] = a * lor
        j[:, 1] = a * lor * lor * 4.0 * u / w
        j[:, 2] = 2.0 * a * u * u * lor * lor
        j[:, 3] = 1.0
        return m, j

    def fun(q):
        return (model_and_jac(q)[0] - yn) / sn

    def jac(q):
        return model_and_jac(q)[1] / sn[:, None]

    q0 = np.array([math.log(a0 / ys), 0.0, 0.0, b0 / ys])
    starts = [q0]
    if multistart:
        starts += [q0 + [0, 0, math.log(0.5), 0], q0 + [0, 0, math.log(2.0), 0]]
    best, multimodal = _multistart(fun, jac, starts, max_nfev=2000)

    la, c, lw, b = best.x
    amp = math.exp(la) * ys
    center = xc + c * w0
    fwhm = math.exp(lw) * w0
    bg = b * ys
    # Jacobian in natural units for the covariance.
    _, jq = model_and_jac(best.x)
    jn = jq / sn[:, None]
    to_nat = np.diag([1.0 / math.exp(la), 1.0, 1.0 / math.exp(lw), 1.0])
    jnat = jn @ to_nat @ np.diag([1.0 / ys, 1.0 / w0, 1.0 / w0, 1.0 / ys])
    cov = _covariance(jnat)
    dof = max(x.size - 4, 1)
    return LineFit(
        amplitude=amp,
        center=center,
        fwhm=fwhm,
        background=bg,
        covariance=cov,
        residual_norm=float(2.0 * best.cost / dof),
        converged=True,
        multimodal=multimodal,
    )


def fit_saturation(line_fits, multistart=True):
    """Joint fit of peak heights and linewidths versus power at the molecule.

    ``peak(P) = F_inf S / (1 + S)`` and ``fwhm(P) = gamma_tot0 sqrt(1 + S)``
    with a shared ``S = P / P_sat``.

    Parameters
    ----------
    line_fits : sequence of (float, LineFit)
        Power at the molecule (W) and the line fit at that power.
    """
    if len(line_fits) == 0:
        raise InsufficientDataError("no line fits supplied")
    p = np.array([float(pw) for pw, _ in line_fits])
    a = np.array([lf.amplitude for _, lf in line_fits])
    w = np.array([lf.fwhm for _, lf in line_fits])
    sa = np.array([math.sqrt(max(lf.covariance[0, 0], 0.0)) for _, lf in line_fits])
    sw = np.array([math.sqrt(max(lf.covariance[2, 2], 0.0)) for _, lf in line_fits])
    if np.any(p <= 0):
        raise DomainError("powers at the molecule must be positive")
    distinct = np.unique(p)
    if distinct.size < 4:
        raise InsufficientDataError(f"need at least 4 distinct powers, got {distinct.size}")
    if distinct[-1] / distinct[0] < 10.0:
        raise InsufficientDataError("powers must span at least a factor of 10")
    # Guard against zero reported errors on perfect data.
    sa = np.maximum(sa, 1e-12 * np.abs(a).max())
    sw = np.maximum(sw, 1e-12 * np.abs(w).max())
    order = np.argsort(p)
    p, a, w, sa, sw = p[order], a[order], w[order], sa[order], sw[order]

    g_init = float(w[0])
    ratio = w / g_init
    above = np.flatnonzero(ratio >= math.sqrt(2.0))
    if above.size and above[0] > 0:
        k = above[0]
        f = (math.sqrt(2.0) - ratio[k - 1]) / (ratio[k] - ratio[k - 1])
        ps_init = math.exp(math.log(p[k - 1]) + f * (math.log(p[k]) - math.log(p[k - 1])))
    elif above.size:
        ps_init = float(p[0])
    else:
        ps_init = float(p[-1])
    s_top = p[-1] / ps_init
    f_init = float(a.max()) * (1.0 + s_top) / s_top
    pn = p / ps_init
    a_scale = f_init
    w_scale = g_init

    def parts(q):
        lf, lps, lg = q
        fi, ps, g0 = math.exp(lf), math.exp(lps), math.exp(lg)
        s = pn / ps
        sq = np.sqrt(1.0 + s)
        ma = fi * s / (1.0 + s)
        mw = g0 * sq
        ja = np.column_stack([ma, -fi * s / (1.0 + s) ** 2, np.zeros_like(s)])
        jw = np.column_stack([np.zeros_like(s), -g0 * s / (2.0 * sq), mw])
        return ma, mw, ja, jw

    an, wn = a / a_scale, w / w_scale
    san, swn = sa / a_scale, sw / w_scale

    def fun(q):
        ma, mw, _, _ = parts(q)
        return np.concatenate([(ma - an) / san, (mw - wn) / swn])

    def jac(q):
        _, _, ja, jw = parts(q)
        return np.vstack([ja / san[:, None], jw / swn[:, None]])

    q0 = np.zeros(3)
    starts = [q0]
    if multistart:
        starts += [q0 + [0, math.log(0.5), 0], q0 + [0, math.log(2.0), 0]]
    best, multimodal = _multistart(fun, jac, starts, max_nfev=2000)
    lf, lps, lg = best.x
    f_inf = math.exp(lf) * a_scale
    p_sat = math.exp(lps) * ps_init
    g0 = math.exp(lg) * w_scale
    log_cov = _covariance(jac(best.x))
    vals = np.array([f_inf, p_sat, g0])
    cov = log_cov * np.outer(vals, vals)
    s_max = float(p[-1] / p_sat)
    if s_max < 0.5:
        raise InsufficientSaturationError(
            f"highest power reaches only S={s_max:.3g}; P_sat is poorly constrained"
        )
    dof = max(2 * p.size - 3, 1)
    err = np.sqrt(np.diag(cov))
    return SaturationFit(
        f_inf=f_inf,
        p_sat=p_sat,
        gamma_tot0=g0,
        f_inf_err=float(err[0]),
        p_sat_err=float(err[1]),
        gamma_tot0_err=float(err[2]),
        covariance=cov,
        log_covariance=log_cov,
        residual_norm=float(2.0 * best.cost / dof),
        max_sat_param=s_max,
        converged=True,
        multimodal=multimodal,
    )


def autocorrelation_histogram(records, bin_width, max_tau):
    """Normalized cross-correlation of two detector records.

    Bins are centred on multiples of ``bin_width`` from ``-max_tau`` to
    ``max_tau``. Counts are divided by ``r1 r2 bin_width (T - |tau|)``, the
    expectation for uncorrelated streams, so that ``g2 -> 1`` at large delay.
    """
    rec1, rec2 = records
    if len(rec1) == 0 or len(rec2) == 0:
        raise DataError("photon record is empty")
    if not bin_width > 0:
        raise DomainError("bin_width must be positive")
    duration = min(rec1.duration, rec2.duration)
    if max_tau > duration / 10.0:
        raise DomainError("max_tau must not exceed duration / 10")
    bw = int(round(bin_width * PS_PER_S))
    if bw < 1:
        raise DomainError("bin_width below the 1 ps timestamp resolution")
    k = int(round(max_tau / bin_width))
    nbins = 2 * k + 1
    lo = -k * bw - bw // 2
    counts = kernels.cross_correlate(rec1.timestamps, rec2.timestamps, lo, bw, nbins)
    tau = (lo + (np.arange(nbins) + 0.5) * bw) / PS_PER_S
    bw_s = bw / PS_PER_S
    n1, n2 = len(rec1), len(rec2)
    norm = (n1 / duration) * (n2 / duration) * bw_s * (duration - np.abs(tau))
    values = counts / norm
    errors = np.sqrt(np.maximum(counts, 1)) / norm

    zero = int(np.argmin(np.abs(tau)))
    neighbours = np.concatenate([values[max(zero - 3, 0):zero], values[zero + 1:zero + 4]])
    divergent = bool(
        values[zero] > 2.0
        and neighbours.size
        and values[zero] > neighbours.max() + 10.0 * errors[zero]
    )
    if divergent:
        warnings.warn("zero-delay bin diverges: channels share coincident events", RuntimeWarning,
                      stacklevel=2)
    return G2Histogram(
        tau=tau,
        values=values,
        errors=errors,
        counts=counts,
        bin_width=bw_s,
        n1=n1,
        n2=n2,
        duration=duration,
        zero_bin_divergent=divergent,
    )


def _dip_rate(t, y):
    """Initial antibunching rate from the delay where g2 recovers to 1/2."""
    order = np.argsort(t)
    t, y = t[order], y[order]
    if t.size == 0 or y[0] >= 0.5:
        return None
    above = np.flatnonzero(y >= 0.5)
    if above.size == 0:
        return None
    t_half = max(t[above[0]], t[1] if t.size > 1 else t[0])
    return math.log(2.0) / t_half


def fit_g2(hist, sat_param=None):
    """Fit ``1 - (1+b) exp(-lam1 tau) + b exp(-lam2 tau)`` to a g2 histogram.

    A one-exponential antibunching fit is done first; the bunching term is
    then added. When the bunching amplitude is consistent with zero the
    antibunching rate of the simpler model is reported and
    ``bunching_unconstrained`` is set. If ``sat_param`` is given, the total
    decay rate is returned as ``lam1 / (1 + S)``.
    """
    if hist.zero_bin_divergent:
        raise DataError("cannot fit a histogram with a divergent zero-delay bin")
    t = np.abs(hist.tau)
    y = hist.values
    s = hist.errors
    if t.size < 5:
        raise InsufficientDataError("histogram has too few bins")
    t_max = float(t.max())
    t_scale = hist.bin_width
    tn = t / t_scale
    flags = []

    lam_init = _dip_rate(t, y)
    no_dip = lam_init is None
    if no_dip:
        lam_init = 2.0 / hist.bin_width
        flags.append("no antibunching dip found")

    def fun1(q):
        return (1.0 - np.exp(-math.exp(q[0]) * tn) - y) / s

    def jac1(q):
        lam = math.exp(q[0])
        return (lam * tn * np.exp(-lam * tn) / s)[:, None]

    q1 = np.array([math.log(lam_init * t_scale)])
    res1, _ = _multistart(fun1, jac1, [q1, q1 + math.log(0.5), q1 + math.log(2.0)],
                          max_nfev=1000)
    lam1_a = math.exp(res1.x[0]) / t_scale
    cov1 = _covariance(jac1(res1.x))
    lam1_a_err = lam1_a * math.sqrt(cov1[0, 0])

    def parts3(q):
        l1, b, l2 = math.exp(q[0]), q[1], math.exp(q[2])
        e1 = np.exp(-l1 * tn)
        e2 = np.exp(-l2 * tn)
        m = 1.0 - (1.0 + b) * e1 + b * e2
        j = np.column_stack([(1.0 + b) * l1 * tn * e1, e2 - e1, -b * l2 * tn * e2])
        return m, j

    def fun3(q):
        return (parts3(q)[0] - y) / s

    def jac3(q):
        return parts3(q)[1] / s[:, None]

    tail = t > 0.2 * t_max
    b_init = max(float(np.mean(y[tail]) - 1.0), 1e-6) if tail.any() else 1e-6
    lam2_init = 10.0 / t_max
    base = np.array([res1.x[0], b_init, math.log(lam2_init * t_scale)])
    starts = [base, base + [0, 0, math.log(0.3)], base + [0, 0, math.log(3.0)]]
    bounds = ([-np.inf, 0.0, -np.inf], [np.inf, np.inf, res1.x[0]])
    try:
        res3, _ = _multistart(fun3, jac3, starts, method="trf", bounds=bounds, max_nfev=2000)
        cov3 = _covariance(jac3(res3.x))
        b = float(res3.x[1])
        b_err = float(math.sqrt(max(cov3[1, 1], 0.0)))
        lam1_b = math.exp(res3.x[0]) / t_scale
        lam1_b_err = lam1_b * math.sqrt(max(cov3[0, 0], 0.0))
        lam2 = math.exp(res3.x[2]) / t_scale
        lam2_err = lam2 * math.sqrt(max(cov3[2, 2], 0.0))
        cost3 = res3.cost
    except ConvergenceError:
        b, b_err, lam2, lam2_err = 0.0, float("inf"), float("nan"), float("nan")
        lam1_b, lam1_b_err, cost3 = lam1_a, lam1_a_err, res1.cost

    bunching_unconstrained = not (b > 2.0 * b_err)
    if bunching_unconstrained:
        flags.append("bunching amplitude consistent with zero")
        lam1, lam1_err, cost, npar = lam1_a, lam1_a_err, res1.cost, 1
    else:
        lam1, lam1_err, cost, npar = lam1_b, lam1_b_err, cost3, 3
    antibunching_unconstrained = bool(
        no_dip or not np.isfinite(lam1_err) or lam1_err > lam1 or 1.0 / lam1 < 0.5 * hist.bin_width
    )
    if antibunching_unconstrained:
        flags.append("antibunching rate unconstrained")
    if sat_param is not None:
        gamma = lam1 / (1.0 + sat_param)
        gamma_err = lam1_err / (1.0 + sat_param)
    else:
        gamma = gamma_err = float("nan")
    dof = max(t.size - npar, 1)
    return G2Fit(
        lam1=lam1,
        lam1_err=lam1_err,
        bunch_amplitude=b,
        bunch_amplitude_err=b_err,
        bunch_rate=lam2,
        bunch_rate_err=lam2_err,
        gamma_tot=gamma,
        gamma_tot_err=gamma_err,
        residual_norm=float(2.0 * cost / dof),
        bunching_unconstrained=bunching_unconstrained,
        antibunching_unconstrained=antibunching_unconstrained,
        flags=flags,
    )


def bootstrap_uncertainty(fit_procedure, data, n_resamples, seed, max_failure_fraction=0.2):
    """Case-resampling bootstrap standard errors.

    ``fit_procedure(sample)`` must return a parameter vector; ``sample`` has
    the type of ``data`` (a NumPy array is indexed along axis 0, anything
    else is rebuilt as a list). Resamples whose fit raises a package error
    are skipped; more than ``max_failure_fraction`` of them is fatal.
    """
    if n_resamples < 100:
        raise DomainError(f"n_resamples must be at least 100, got {n_resamples}")
    n = len(data)
    if n == 0:
        raise InsufficientDataError("no data to resample")
    rng = make_rng(seed)
    is_array = isinstance(data, np.ndarray)
    estimates = []
    failures = 0
    for _ in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        sample = data[idx] if is_array else [data[i] for i in idx]
        try:
            estimates.append(np.asarray(fit_procedure(sample), dtype=float))
        except ZplQeError:
            failures += 1
    if failures > max_failure_fraction * n_resamples:
        raise NumericalError(f"{failures} of {n_resamples} bootstrap resamples failed")
    return np.std(np.array(estimates), axis=0, ddof=1)
