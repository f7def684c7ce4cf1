"""Quantum-efficiency extraction for single molecules and ensembles.

Two independent routes give an orientation-weighted lower bound of the QE:

* saturation counts: the detected rate at infinite drive, ``F_inf``, equals
  ``eta_tot * gamma_r / 2``; with the in-plane collection efficiency this
  yields ``QE * eta_coll(theta) / eta_coll(0)``.
* saturation power: ``P_sat`` and the effective excitation area ``A_eff``
  fix the ZPL decay rate, which gives ``QE * cos^2(theta)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RectBivariateSpline

from . import fitkit, physics
from .errors import DataError, DomainError, FitError, InsufficientDataError

__all__ = [
    "MoleculeResult",
    "EnsembleReport",
    "CalibrationResult",
    "line_scans",
    "estimate_position",
    "effective_area",
    "qe_method_saturation_counts",
    "qe_method_saturation_power",
    "analyze_molecule",
    "ensemble_report",
    "calibrate_spectral_factor",
    "reference_curves",
    "QUANTILES",
]

_logger = logging.getLogger(__name__)

QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)

# Interpolation neighbourhood half-width and required distance from the edge.
_INTERP_HALF = 2
_EDGE_MARGIN = 3


@dataclass
class MoleculeResult:
    """Per-molecule fit results and both effective-QE values.

    ``qe_eff_counts`` is ``QE * eta_coll(theta) / eta_coll(0)``,
    ``qe_eff_power`` is ``QE * cos^2(theta)``. Quantities that could not be
    computed are NaN with ``valid[name] = False``.
    """

    id: str
    lambda_zpl: float
    f_inf: float
    p_sat: float
    gamma_tot: float
    a_eff: float
    i_sat_inv: float
    qe_eff_counts: float
    qe_eff_power: float
    f_inf_err: float = float("nan")
    p_sat_err: float = float("nan")
    gamma_tot_err: float = float("nan")
    a_eff_err: float = float("nan")
    i_sat_inv_err: float = float("nan")
    qe_eff_counts_err: float = float("nan")
    qe_eff_power_err: float = float("nan")
    excluded: bool = False
    exclusion_reason: str = ""
    valid: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)


@dataclass
class EnsembleReport:
    results: list
    corr_finf_isat: float
    corr_gamma_qe_counts: float
    corr_gamma_qe_power: float
    quantiles_counts: dict
    quantiles_power: dict
    reference_curves: dict
    excluded_ids: list
    calibration: "CalibrationResult | None" = None
    flags: list = field(default_factory=list)


@dataclass
class CalibrationResult:
    alpha: float
    kappa: float
    score: float
    scores: np.ndarray
    alpha_grid: np.ndarray
    kappa_grid: np.ndarray


def line_scans(scan, tau_dead):
    """Split a scan series into dead-time corrected :class:`fitkit.LineScan` slices.

    Zero-power slices carry no line and are skipped.
    """
    out = []
    for p in scan.powers:
        if p <= 0:
            continue
        idx = scan.rows(p)
        counts = scan.counts[idx].astype(float)
        dwell = scan.dwell_time[idx]
        measured = counts / dwell
        rate = np.asarray(physics.apd_correct_rate(measured, tau_dead))
        gain = 1.0 / (1.0 - measured * tau_dead) ** 2
        sigma = np.sqrt(np.maximum(counts, 1.0)) / dwell * gain
        out.append(fitkit.LineScan(scan.detuning[idx], rate, sigma, source_power=float(p)))
    return out


def _corrected_counts(raster, tau_dead):
    measured = raster.values.astype(float) / raster.dwell_time
    rate = np.asarray(physics.apd_correct_rate(measured, tau_dead))
    gain = 1.0 / (1.0 - measured * tau_dead) ** 2
    return rate * raster.dwell_time, gain


def _border(values):
    return np.concatenate([values[0, :], values[-1, :], values[1:-1, 0], values[1:-1, -1]])


def estimate_position(raster, tau_dead=0.0):
    """Molecule position from the background-subtracted centroid above half maximum."""
    v, _ = _corrected_counts(raster, tau_dead)
    v = v - np.median(_border(v))
    peak = v.max()
    if not peak > 0:
        raise DataError("raster contains no signal above background")
    w = np.where(v > 0.5 * peak, v, 0.0)
    x, y = raster.coordinates()
    total = w.sum()
    return float((w.sum(axis=0) @ x) / total), float((w.sum(axis=1) @ y) / total)


def effective_area(raster, mol_position, tau_dead=0.0, return_error=False):
    """Effective illumination area ``sum(I) dA / I(r_mol)`` from a raster map (m^2).

    The background is the median of the border pixels. The peak is read off
    a bicubic interpolant through the 5x5 pixels around ``mol_position``,
    which must lie at least three pixels inside every edge.

    With ``return_error=True`` a first-order Poisson uncertainty is returned
    as ``(a_eff, a_eff_err)``.
    """
    v, gain = _corrected_counts(raster, tau_dead)
    ny, nx = v.shape
    ix = int(round((mol_position[0] - raster.origin[0]) / raster.pitch))
    iy = int(round((mol_position[1] - raster.origin[1]) / raster.pitch))
    if not (_EDGE_MARGIN <= ix <= nx - 1 - _EDGE_MARGIN and _EDGE_MARGIN <= iy <= ny - 1 - _EDGE_MARGIN):
        raise DomainError(
            f"molecule position {mol_position} is outside the raster or within "
            f"{_EDGE_MARGIN} pixels of an edge"
        )
    border = _border(v)
    bg = float(np.median(border))
    x, y = raster.coordinates()
    sl_x = slice(ix - _INTERP_HALF, ix + _INTERP_HALF + 1)
    sl_y = slice(iy - _INTERP_HALF, iy + _INTERP_HALF + 1)
    spline = RectBivariateSpline(y[sl_y], x[sl_x], v[sl_y, sl_x], kx=3, ky=3, s=0)
    peak = float(spline(mol_position[1], mol_position[0])[0, 0]) - bg
    if not peak > 0:
        raise DataError("background exceeds the peak value: negative effective area")
    total = float(np.sum(v - bg))
    area = total * raster.pitch**2 / peak
    if not area > 0:
        raise DataError("integrated signal is not positive: negative effective area")
    if not return_error:
        return area
    raw = raster.values.astype(float)
    var_pix = np.maximum(raw, 1.0) * gain**2
    sigma_bg = 1.2533 * math.sqrt(max(bg, 1.0) / border.size)
    var_total = float(var_pix.sum()) + (v.size * sigma_bg) ** 2
    var_peak = float(var_pix[iy, ix]) + sigma_bg**2
    rel = math.sqrt(var_total / total**2 + var_peak / peak**2)
    return area, area * rel


def linearize_raster(raster, f_inf, tau_dead=0.0):
    """Undo resonant saturation of a raster map.

    A resonantly driven molecule responds as ``S / (1 + S)``, so a map taken
    at finite power is flatter than the intensity profile and overestimates
    ``A_eff`` by about ``S/2``. With the saturated rate ``f_inf`` from the
    power series, the background-free rate ``r`` of each pixel is mapped to
    ``r / (1 - r / f_inf)``, which is proportional to the local intensity.
    The returned map is dead-time corrected (analyze it with ``tau_dead=0``)
    and keeps the border-median background.
    """
    if not f_inf > 0:
        raise DomainError("f_inf must be positive")
    v, _ = _corrected_counts(raster, tau_dead)
    bg = float(np.median(_border(v)))
    u = v - bg
    frac = u / (raster.dwell_time * f_inf)
    if np.any(frac >= 1.0):
        raise DataError("raster rate reaches the saturated rate of the power series")
    meta = dict(raster.metadata)
    meta["linearized"] = True
    meta["peak_sat_param"] = float(frac.max() / (1.0 - frac.max()))
    return type(raster)(
        pitch=raster.pitch,
        origin=raster.origin,
        values=bg + u / (1.0 - frac),
        dwell_time=raster.dwell_time,
        source_power=raster.source_power,
        metadata=meta,
    )


def qe_method_saturation_counts(f_inf, gamma_tot, emitter_alpha, chain):
    """``QE * eta_coll(theta) / eta_coll(0)`` from the saturated detected rate.

    ``f_inf`` must already be corrected for detector dead time.
    """
    if not (f_inf > 0 and gamma_tot > 0):
        raise DomainError("f_inf and gamma_tot must be positive")
    eta0 = chain.eta_coll_h * chain.eta_tr * chain.eta_det * chain.kappa * (1.0 - emitter_alpha)
    if not eta0 > 0:
        raise DomainError("detection efficiency must be positive")
    gamma_r = 2.0 * f_inf / eta0
    return gamma_r / gamma_tot


def qe_method_saturation_power(p_sat, a_eff, gamma_tot, lambda_zpl, env, emitter_alpha):
    """``QE * cos^2(theta)`` from the saturation power and effective area."""
    if not (p_sat > 0 and a_eff > 0 and gamma_tot > 0 and lambda_zpl > 0 and emitter_alpha > 0):
        raise DomainError("all inputs must be positive")
    gamma_zpl_cos2 = physics.saturation_prefactor(lambda_zpl, a_eff, env) * gamma_tot**2 / p_sat
    gamma_r_cos2 = gamma_zpl_cos2 / emitter_alpha
    return gamma_r_cos2 / gamma_tot


def _rel_err(value, err):
    return err / value if value else float("nan")


def analyze_molecule(
    scan,
    raster,
    chain,
    env,
    alpha,
    mol_position=None,
    lambda_zpl=None,
    emitter_id=None,
    n_bootstrap=100,
    seed=0,
):
    """Full per-molecule workflow: line fits, saturation fit, A_eff, both QE values.

    Parameters
    ----------
    scan : ScanSeries
        Source powers are converted to powers at the molecule with ``chain.eta_exc``.
    raster : RasterMap or None
        Without a raster only the saturation-count method is evaluated.
    mol_position : (float, float) or None
        Molecule position in raster coordinates; estimated from the map if omitted.
    lambda_zpl : float or None
        ZPL wavelength, default from ``scan.metadata['wavelength_m']``.
    n_bootstrap : int
        Bootstrap resamples of the saturation fit (0 disables). The larger of
        the first-order and bootstrap errors is reported.
    """
    emitter_id = emitter_id if emitter_id is not None else str(scan.metadata.get("emitter_id", ""))
    if lambda_zpl is None:
        lambda_zpl = scan.metadata.get("wavelength_m")
    lambda_zpl = float(lambda_zpl) if lambda_zpl is not None else float("nan")

    pairs = []
    skipped = []
    line_diag = []
    for ls in line_scans(scan, chain.tau_dead):
        try:
            lf = fitkit.fit_lorentzian(ls)
        except FitError as exc:
            skipped.append({"source_power_w": ls.source_power, "reason": str(exc)})
            continue
        pairs.append((chain.eta_exc * ls.source_power, lf))
        line_diag.append(
            {
                "source_power_w": ls.source_power,
                "amplitude": lf.amplitude,
                "center_rad_s": lf.center,
                "fwhm_rad_s": lf.fwhm,
                "background": lf.background,
                "errors": lf.errors.tolist(),
                "residual_norm": lf.residual_norm,
                "multimodal": lf.multimodal,
            }
        )
    sat = fitkit.fit_saturation(pairs)
    errs = np.array([sat.f_inf_err, sat.p_sat_err, sat.gamma_tot0_err])
    boot = None
    if n_bootstrap:
        boot = fitkit.bootstrap_uncertainty(
            lambda sample: fitkit.fit_saturation(sample, multistart=False).params,
            pairs,
            n_bootstrap,
            seed,
        )
        errs = np.maximum(errs, boot)
    f_inf, p_sat, gamma = sat.f_inf, sat.p_sat, sat.gamma_tot0
    rf, rp, rg = errs / sat.params
    lc = sat.log_covariance
    corr = lc / np.sqrt(np.outer(np.diag(lc), np.diag(lc)))

    valid = {"qe_eff_counts": True, "qe_eff_power": True}
    reasons = {}
    qe1 = qe_method_saturation_counts(f_inf, gamma, alpha, chain)
    qe1_err = qe1 * math.sqrt(max(rf**2 + rg**2 - 2 * corr[0, 2] * rf * rg, 0.0))

    a_eff = a_err = qe2 = qe2_err = raster_sat = float("nan")
    if raster is None:
        valid["qe_eff_power"] = False
        reasons["qe_eff_power"] = "missing raster"
    elif not np.isfinite(lambda_zpl):
        valid["qe_eff_power"] = False
        reasons["qe_eff_power"] = "missing wavelength"
    else:
        if mol_position is None:
            mol_position = estimate_position(raster, chain.tau_dead)
        lin = linearize_raster(raster, f_inf, chain.tau_dead)
        raster_sat = lin.metadata["peak_sat_param"]
        a_eff, a_err = effective_area(lin, mol_position, 0.0, return_error=True)
        qe2 = qe_method_saturation_power(p_sat, a_eff, gamma, lambda_zpl, env, alpha)
        ra = a_err / a_eff
        qe2_err = qe2 * math.sqrt(max(ra**2 + rg**2 + rp**2 - 2 * corr[1, 2] * rg * rp, 0.0))
    i_sat_inv = a_eff / p_sat if valid["qe_eff_power"] else float("nan")
    i_sat_inv_err = i_sat_inv * math.sqrt((a_err / a_eff) ** 2 + rp**2) if valid["qe_eff_power"] else float("nan")

    over = (qe1 - qe1_err > 1.0) or (valid["qe_eff_power"] and qe2 - qe2_err > 1.0)
    diagnostics = {
        "line_fits": line_diag,
        "skipped_powers": skipped,
        "saturation": {
            "f_inf": f_inf,
            "p_sat_w": p_sat,
            "gamma_tot0_rad_s": gamma,
            "first_order_errors": [sat.f_inf_err, sat.p_sat_err, sat.gamma_tot0_err],
            "bootstrap_errors": None if boot is None else boot.tolist(),
            "residual_norm": sat.residual_norm,
            "max_sat_param": sat.max_sat_param,
            "multimodal": sat.multimodal,
        },
        "raster_peak_sat_param": raster_sat,
        "mol_position_m": None if mol_position is None else [float(mol_position[0]), float(mol_position[1])],
        "invalid_reasons": reasons,
    }
    return MoleculeResult(
        id=emitter_id,
        lambda_zpl=lambda_zpl,
        f_inf=f_inf,
        p_sat=p_sat,
        gamma_tot=gamma,
        a_eff=a_eff,
        i_sat_inv=i_sat_inv,
        qe_eff_counts=qe1,
        qe_eff_power=qe2,
        f_inf_err=float(errs[0]),
        p_sat_err=float(errs[1]),
        gamma_tot_err=float(errs[2]),
        a_eff_err=a_err,
        i_sat_inv_err=i_sat_inv_err,
        qe_eff_counts_err=qe1_err,
        qe_eff_power_err=qe2_err,
        excluded=bool(over),
        exclusion_reason="qe>1" if over else "",
        valid=valid,
        diagnostics=diagnostics,
    )


def reference_curves(eta_ratio, n=101):
    """Expected (qe_eff_power, qe_eff_counts) loci.

    ``qe1_theta``: QE = 1 with theta from 0 to pi/2; ``theta0``: theta = 0
    with QE from 0 to 1. ``eta_ratio`` is ``eta_coll_v / eta_coll_h``.
    """
    theta = np.linspace(0.0, math.pi / 2, n)
    c2 = np.cos(theta) ** 2
    q = np.linspace(0.0, 1.0, n)
    return {
        "qe1_theta": {"theta": theta, "qe_eff_power": c2, "qe_eff_counts": c2 + eta_ratio * (1 - c2)},
        "theta0": {"qe": q, "qe_eff_power": q, "qe_eff_counts": q},
    }


def _pearson(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def _quantiles(values):
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {str(q): float("nan") for q in QUANTILES}
    return {str(q): float(x) for q, x in zip(QUANTILES, np.quantile(v, QUANTILES))}


def ensemble_report(results, eta_ratio=1.0 / 9.0, strict=True, calibration=None):
    """Ensemble statistics over the non-excluded molecules.

    Parameters
    ----------
    results : sequence of MoleculeResult
    eta_ratio : float
        ``eta_coll_v / eta_coll_h`` for the QE = 1 reference curve.
    strict : bool
        Raise :class:`InsufficientDataError` for fewer than three usable
        molecules; otherwise report NaN statistics with a flag.
    calibration : dict or None
        Keyword arguments for :func:`calibrate_spectral_factor`; computed only
        when at least five molecules carry both QE values.
    """
    ordered = sorted(results, key=lambda r: r.id)
    kept = [r for r in ordered if not r.excluded]
    flags = []
    if len(kept) < 3:
        if strict:
            raise InsufficientDataError(f"need at least 3 non-excluded results, got {len(kept)}")
        flags.append("fewer than 3 usable molecules")
    f = [r.f_inf for r in kept]
    isat = [r.i_sat_inv for r in kept]
    g = [r.gamma_tot for r in kept]
    q1 = [r.qe_eff_counts for r in kept]
    q2 = [r.qe_eff_power for r in kept]
    enough = len(kept) >= 3
    c_fi = _pearson(f, isat) if enough else float("nan")
    c_g1 = _pearson(g, q1) if enough else float("nan")
    c_g2 = _pearson(g, q2) if enough else float("nan")
    for name, val in (("corr_finf_isat", c_fi), ("corr_gamma_qe_counts", c_g1),
                      ("corr_gamma_qe_power", c_g2)):
        if not np.isfinite(val):
            flags.append(f"{name} undefined")
    cal = None
    if calibration is not None:
        both = [r for r in kept if r.valid.get("qe_eff_power", False)]
        if len(both) >= 5:
            cal = calibrate_spectral_factor(kept, **calibration)
        else:
            flags.append("calibration skipped: fewer than 5 molecules with both methods")
    return EnsembleReport(
        results=ordered,
        corr_finf_isat=c_fi,
        corr_gamma_qe_counts=c_g1,
        corr_gamma_qe_power=c_g2,
        quantiles_counts=_quantiles(q1),
        quantiles_power=_quantiles(q2),
        reference_curves=reference_curves(eta_ratio),
        excluded_ids=[r.id for r in ordered if r.excluded],
        calibration=cal,
        flags=flags,
    )


def calibrate_spectral_factor(
    results, alpha_grid, kappa_grid, chain, env=None, include_excluded=False
):
    """Grid search for the branching ratio and red-shifted detection factor.

    Both QE values are recomputed for every ``(alpha, kappa)`` from the fitted
    ``f_inf``, ``p_sat``, ``gamma_tot``, ``a_eff`` and wavelength. The score
    is the median over molecules of ``|log(qe_eff_counts / qe_eff_power)|``.
    Ties go to the smaller alpha, then the smaller kappa.

    Only the combination ``alpha / (kappa (1 - alpha))`` enters the score, so
    the grid has to be chosen with that degeneracy in mind.
    """
    env = env or physics.EnvironmentParams()
    usable = [
        r for r in sorted(results, key=lambda r: r.id)
        if (include_excluded or not r.excluded)
        and r.valid.get("qe_eff_power", False)
        and np.isfinite(r.a_eff)
    ]
    if len(usable) < 5:
        raise InsufficientDataError(
            f"calibration needs at least 5 molecules with both methods, got {len(usable)}"
        )
    alpha_grid = np.sort(np.asarray(alpha_grid, dtype=float))
    kappa_grid = np.sort(np.asarray(kappa_grid, dtype=float))
    if alpha_grid.size == 0 or kappa_grid.size == 0:
        raise DomainError("calibration grids must be non-empty")
    scores = np.empty((alpha_grid.size, kappa_grid.size))
    for i, a in enumerate(alpha_grid):
        for j, k in enumerate(kappa_grid):
            trial = chain.replace(kappa=float(k))
            logs = [
                math.log(
                    qe_method_saturation_counts(r.f_inf, r.gamma_tot, a, trial)
                    / qe_method_saturation_power(r.p_sat, r.a_eff, r.gamma_tot, r.lambda_zpl, env, a)
                )
                for r in usable
            ]
            scores[i, j] = float(np.median(np.abs(logs)))
    best = None
    for i in range(alpha_grid.size):
        for j in range(kappa_grid.size):
            s = scores[i, j]
            if best is None or s < best[0] - 1e-12 * max(abs(best[0]), 1e-300):
                best = (s, i, j)
    s, i, j = best
    return CalibrationResult(
        alpha=float(alpha_grid[i]),
        kappa=float(kappa_grid[j]),
        score=float(s),
        scores=scores,
        alpha_grid=alpha_grid,
        kappa_grid=kappa_grid,
    )
