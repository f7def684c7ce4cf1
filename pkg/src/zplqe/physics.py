"""Closed-form forward model of a resonantly driven single emitter.

All decay rates and detunings are angular frequencies (rad/s). Spectroscopic
linewidths quoted in Hz are converted with a factor 2*pi at the I/O boundary.

The emitter is a two-level system (S0, S1) with an optional long-lived
shelving level (triplet) fed by intersystem crossing. Detected rates pass
through an orientation-dependent collection efficiency, the transmission
chain, an additive background, and a non-paralyzable detector dead time.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy import constants

from .errors import DetectorSaturationError, DomainError, SingularityError

__all__ = [
    "EmitterParams",
    "DetectionChain",
    "EnvironmentParams",
    "excited_population",
    "detected_rate",
    "power_broadened_fwhm",
    "collection_efficiency",
    "total_detection_efficiency",
    "saturation_power",
    "saturation_prefactor",
    "apd_measured_rate",
    "apd_correct_rate",
    "isc_reduction_factor",
    "rate_matrix",
    "g2_parameters",
    "g2_three_level",
    "pump_rate",
]

HBAR = constants.hbar
C_LIGHT = constants.c

# Angles within this distance of pi/2 are treated as a vertical dipole.
_VERTICAL_TOL = 1e-12


def _check_efficiency(name, value):
    if not (0.0 < value <= 1.0):
        raise DomainError(f"{name} must lie in (0, 1], got {value!r}")


@dataclass(frozen=True)
class EmitterParams:
    """Ground truth of a single molecule.

    Parameters
    ----------
    gamma_r, gamma_nr : float
        Radiative and nonradiative decay rates of S1 (rad/s).
    lambda_zpl : float
        Vacuum wavelength of the zero-phonon line (m).
    alpha : float
        Fraction of the emission contained in the ZPL.
    theta : float
        Out-of-plane dipole angle (rad), 0 for an in-plane dipole.
    phi_isc : float
        Intersystem-crossing yield per excited-state decay.
    tau_triplet : float
        Lifetime of the shelving level (s).
    """

    gamma_r: float
    gamma_nr: float = 0.0
    lambda_zpl: float = 743.7e-9
    alpha: float = 0.33
    theta: float = 0.0
    phi_isc: float = 1e-6
    tau_triplet: float = 5e-6

    def __post_init__(self):
        if not self.gamma_r > 0:
            raise DomainError(f"gamma_r must be positive, got {self.gamma_r!r}")
        if not self.gamma_nr >= 0:
            raise DomainError(f"gamma_nr must be non-negative, got {self.gamma_nr!r}")
        if not self.lambda_zpl > 0:
            raise DomainError(f"lambda_zpl must be positive, got {self.lambda_zpl!r}")
        if not (0.0 < self.alpha <= 1.0):
            raise DomainError(f"alpha must lie in (0, 1], got {self.alpha!r}")
        if not (0.0 <= self.theta <= math.pi / 2):
            raise DomainError(f"theta must lie in [0, pi/2], got {self.theta!r}")
        if not (0.0 <= self.phi_isc < 1.0):
            raise DomainError(f"phi_isc must lie in [0, 1), got {self.phi_isc!r}")
        if not self.tau_triplet > 0:
            raise DomainError(f"tau_triplet must be positive, got {self.tau_triplet!r}")

    @classmethod
    def from_linewidth(cls, linewidth_hz, qe, **kwargs):
        """Build an emitter from a lifetime-limited FWHM in Hz and a QE."""
        if not (0.0 < qe <= 1.0):
            raise DomainError(f"qe must lie in (0, 1], got {qe!r}")
        gamma_tot = 2 * math.pi * linewidth_hz
        gamma_r = qe * gamma_tot
        return cls(gamma_r=gamma_r, gamma_nr=gamma_tot - gamma_r, **kwargs)

    @property
    def gamma_tot(self):
        return self.gamma_r + self.gamma_nr

    @property
    def qe(self):
        return self.gamma_r / self.gamma_tot

    @property
    def gamma_zpl(self):
        return self.alpha * self.gamma_r

    @property
    def omega_zpl(self):
        return 2 * math.pi * C_LIGHT / self.lambda_zpl

    @property
    def k_isc(self):
        return self.phi_isc * self.gamma_tot

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DetectionChain:
    """Setup efficiencies, detector dead time and background.

    ``kappa`` is the detection efficiency of the red-shifted fluorescence
    relative to the ZPL, so the spectral factor is ``kappa * (1 - alpha)``.
    """

    eta_coll_h: float = 0.09
    eta_coll_v: float = 0.01
    eta_tr: float = 0.69
    eta_det: float = 0.55
    kappa: float = 0.8
    eta_exc: float = 1.0
    tau_dead: float = 50e-9
    background_rate: float = 100.0

    def __post_init__(self):
        for name in ("eta_coll_h", "eta_coll_v", "eta_tr", "eta_det", "kappa", "eta_exc"):
            _check_efficiency(name, getattr(self, name))
        if self.eta_coll_v > self.eta_coll_h:
            raise DomainError("eta_coll_v must not exceed eta_coll_h")
        if not self.tau_dead >= 0:
            raise DomainError(f"tau_dead must be non-negative, got {self.tau_dead!r}")
        if not self.background_rate >= 0:
            raise DomainError(
                f"background_rate must be non-negative, got {self.background_rate!r}"
            )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class EnvironmentParams:
    n_host: float = 1.6

    def __post_init__(self):
        if not self.n_host >= 1.0:
            raise DomainError(f"n_host must be >= 1, got {self.n_host!r}")


def _scalar_or_array(x):
    return x.item() if isinstance(x, np.ndarray) and x.ndim == 0 else x


def excited_population(detuning, sat_param, gamma_tot):
    """Steady-state excited-state population of a driven two-level system.

    ``rho_ee = (S/2) / (1 + S + (2*detuning/gamma_tot)**2)`` with zero pure
    dephasing. Accepts scalars or arrays; ``sat_param=inf`` gives 1/2 on
    resonance.
    """
    s = np.asarray(sat_param, dtype=float)
    if np.any(s < 0) or np.any(np.isnan(s)):
        raise DomainError("sat_param must be non-negative")
    if not np.all(np.asarray(gamma_tot, dtype=float) > 0):
        raise DomainError("gamma_tot must be positive")
    x = 2.0 * np.asarray(detuning, dtype=float) / gamma_tot
    with np.errstate(divide="ignore", over="ignore"):
        rho = 0.5 / (1.0 + (1.0 + x * x) / s)
    return _scalar_or_array(rho)


def power_broadened_fwhm(gamma_tot, sat_param):
    s = np.asarray(sat_param, dtype=float)
    if np.any(s < 0):
        raise DomainError("sat_param must be non-negative")
    return _scalar_or_array(gamma_tot * np.sqrt(1.0 + s))


def collection_efficiency(theta, chain):
    """``eta_H cos^2(theta) + eta_V sin^2(theta)`` for a dipole at ``theta``."""
    t = np.asarray(theta, dtype=float)
    if np.any(t < 0) or np.any(t > math.pi / 2 + _VERTICAL_TOL):
        raise DomainError("theta must lie in [0, pi/2]")
    c2 = np.cos(t) ** 2
    return _scalar_or_array(chain.eta_coll_h * c2 + chain.eta_coll_v * (1.0 - c2))


def total_detection_efficiency(emitter, chain):
    eta_spec = chain.kappa * (1.0 - emitter.alpha)
    return (
        collection_efficiency(emitter.theta, chain) * chain.eta_tr * chain.eta_det * eta_spec
    )


def saturation_prefactor(lambda_zpl, a_eff, env):
    """``(pi/3) (n/lambda)^2 A_eff hbar omega`` in J m^0; multiplies gamma_tot^2/gamma_zpl."""
    omega = 2 * math.pi * C_LIGHT / lambda_zpl
    return (math.pi / 3.0) * env.n_host**2 / lambda_zpl**2 * a_eff * HBAR * omega


def saturation_power(emitter, a_eff, env, theta=None):
    """Saturation power at the molecule for a beam of effective area ``a_eff``.

    The excitation coupling of a dipole tilted by ``theta`` out of the focal
    plane scales as cos^2(theta), so the saturation power diverges for a
    vertical dipole and :class:`SingularityError` is raised there.
    """
    if not a_eff > 0:
        raise DomainError(f"a_eff must be positive, got {a_eff!r}")
    theta = emitter.theta if theta is None else theta
    if not (0.0 <= theta <= math.pi / 2):
        raise DomainError("theta must lie in [0, pi/2]")
    if theta >= math.pi / 2 - _VERTICAL_TOL:
        raise SingularityError("saturation power is infinite for a vertical dipole")
    cos2 = math.cos(theta) ** 2
    pref = saturation_prefactor(emitter.lambda_zpl, a_eff, env)
    return pref * emitter.gamma_tot**2 / (emitter.gamma_zpl * cos2)


def apd_measured_rate(true_rate, tau_dead):
    """Non-paralyzable dead time: ``n / (1 + n tau)``."""
    n = np.asarray(true_rate, dtype=float)
    if np.any(n < 0):
        raise DomainError("true_rate must be non-negative")
    if tau_dead < 0:
        raise DomainError("tau_dead must be non-negative")
    if tau_dead == 0:
        return _scalar_or_array(n.copy() if n.ndim else n)
    with np.errstate(invalid="ignore"):
        m = np.where(np.isinf(n), 1.0 / tau_dead, n / (1.0 + n * tau_dead))
    return _scalar_or_array(m)


def apd_correct_rate(measured_rate, tau_dead):
    """Invert :func:`apd_measured_rate`: ``m / (1 - m tau)``."""
    m = np.asarray(measured_rate, dtype=float)
    if tau_dead < 0:
        raise DomainError("tau_dead must be non-negative")
    if tau_dead == 0:
        return _scalar_or_array(m.copy() if m.ndim else m)
    if np.any(m * tau_dead >= 1.0):
        raise DetectorSaturationError(
            f"measured rate at or above detector ceiling 1/tau_dead = {1.0 / tau_dead:.4g} /s"
        )
    return _scalar_or_array(m / (1.0 - m * tau_dead))


def isc_reduction_factor(rho_ee, emitter):
    """Fraction of the emission surviving triplet shelving at population ``rho_ee``."""
    rho = np.asarray(rho_ee, dtype=float)
    return _scalar_or_array(
        1.0 / (1.0 + rho * emitter.gamma_tot * emitter.phi_isc * emitter.tau_triplet)
    )


def detected_rate(emitter, chain, detuning, power_at_molecule, p_sat):
    """Mean detector count rate (counts/s) under continuous resonant drive."""
    if not p_sat > 0:
        raise DomainError(f"p_sat must be positive, got {p_sat!r}")
    power = np.asarray(power_at_molecule, dtype=float)
    if np.any(power < 0):
        raise DomainError("power_at_molecule must be non-negative")
    rho = np.asarray(excited_population(detuning, power / p_sat, emitter.gamma_tot))
    emitted = emitter.gamma_r * rho * isc_reduction_factor(rho, emitter)
    true_rate = total_detection_efficiency(emitter, chain) * emitted + chain.background_rate
    return apd_measured_rate(true_rate, chain.tau_dead)


def pump_rate(emitter, sat_param):
    """Incoherent S0->S1 pump rate reproducing the resonant ``rho_ee`` for ``S``."""
    if sat_param < 0:
        raise DomainError("sat_param must be non-negative")
    return 0.5 * sat_param * emitter.gamma_tot


def rate_matrix(emitter, sat_param):
    """Generator ``M`` of ``dp/dt = M p`` for populations ``p = (S0, S1, T)``.

    Intersystem crossing ``k = phi_isc * gamma_tot`` is one branch of the
    total S1 decay, so S1 is depleted at ``R + gamma_tot`` in total.
    """
    r = pump_rate(emitter, sat_param)
    g = emitter.gamma_tot
    k = emitter.k_isc
    kt = 1.0 / emitter.tau_triplet
    return np.array(
        [
            [-r, r + g - k, kt],
            [r, -(r + g), 0.0],
            [0.0, k, -kt],
        ]
    )


def g2_parameters(emitter, sat_param):
    """Antibunching rate, bunching rate and bunching amplitude.

    Returns ``(lam1, lam2, b)`` with ``g2(tau) = 1 - (1+b) exp(-lam1 tau)
    + b exp(-lam2 tau)``; ``lam1 >= lam2`` are the non-zero eigenvalues of
    ``-rate_matrix``.
    """
    r = pump_rate(emitter, sat_param)
    g = emitter.gamma_tot
    k = emitter.k_isc
    kt = 1.0 / emitter.tau_triplet
    # Non-zero eigenvalues from trace and the sum of principal 2x2 minors.
    s = 2 * r + g + kt
    p = r * k + (2 * r + g) * kt
    disc = math.sqrt(max(s * s / 4.0 - p, 0.0))
    lam1 = s / 2.0 + disc
    lam2 = p / lam1
    if lam1 == lam2:
        return lam1, lam2, 0.0
    rho = r / (2 * r + g)
    # R / p_e(inf), written to stay finite at R = 0.
    slope = (2 * r + g) * (1.0 + rho * k * emitter.tau_triplet)
    b = (slope - lam1) / (lam1 - lam2)
    return lam1, lam2, b


def g2_three_level(tau, emitter, sat_param):
    """Normalized intensity autocorrelation of the three-level rate model."""
    if sat_param < 0:
        raise DomainError("sat_param must be non-negative")
    lam1, lam2, b = g2_parameters(emitter, sat_param)
    t = np.abs(np.asarray(tau, dtype=float))
    return _scalar_or_array(1.0 - (1.0 + b) * np.exp(-lam1 * t) + b * np.exp(-lam2 * t))
