import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm, null_space

from zplqe import physics
from zplqe.errors import DetectorSaturationError, DomainError, SingularityError

TWO_PI = 2 * math.pi
GAMMA_25 = TWO_PI * 25e6

# Independent 40-digit evaluations of the detection chain and saturation formula.
ETA_TOT_H = 0.01830708
ETA_TOT_V = 0.00203412
QE_FROM_COUNTS = 0.695490239150734407754306
QE_FROM_POWER = 0.9243770774808125284304927436933
GAMMA_ZPL_BACKSOLVED = 47916267.89004864
FWHM_AT_S1 = 222144146.9079183


def test_excited_population_reference_point():
    # S = 0.5 at half a linewidth: 0.25 / (1 + 0.5 + 1)
    assert physics.excited_population(GAMMA_25 / 2, 0.5, GAMMA_25) == pytest.approx(0.1, rel=1e-14)


def test_excited_population_limits():
    assert physics.excited_population(0.0, np.inf, GAMMA_25) == 0.5
    assert physics.excited_population(0.0, 0.0, GAMMA_25) == 0.0
    assert physics.excited_population(1e9, np.inf, GAMMA_25) == 0.5


def test_excited_population_rejects_bad_input():
    with pytest.raises(DomainError):
        physics.excited_population(0.0, -0.1, GAMMA_25)
    with pytest.raises(DomainError):
        physics.excited_population(0.0, 1.0, 0.0)


@given(s=st.floats(1e-4, 1e4), x=st.floats(-50, 50))
def test_excited_population_bounded_and_even(s, x):
    rho = physics.excited_population(x * GAMMA_25, s, GAMMA_25)
    assert 0 <= rho < 0.5
    assert rho == physics.excited_population(-x * GAMMA_25, s, GAMMA_25)


@given(s1=st.floats(0, 1e3), s2=st.floats(0, 1e3))
def test_excited_population_monotone_in_power(s1, s2):
    lo, hi = sorted((s1, s2))
    assert physics.excited_population(0.0, lo, GAMMA_25) <= physics.excited_population(0.0, hi, GAMMA_25)


def test_power_broadened_fwhm():
    assert physics.power_broadened_fwhm(GAMMA_25, 1.0) == pytest.approx(FWHM_AT_S1, rel=1e-15)


@pytest.mark.parametrize("s", [1e-3, 0.3, 1.0, 10.0])
def test_fwhm_matches_numerical_half_maximum(s):
    from scipy.optimize import brentq

    g = GAMMA_25
    peak = physics.excited_population(0.0, s, g)
    half = brentq(lambda d: physics.excited_population(d, s, g) - peak / 2, 0, 100 * g, xtol=1e-6)
    assert 2 * half == pytest.approx(physics.power_broadened_fwhm(g, s), rel=1e-9)


def test_collection_efficiency_endpoints(chain):
    assert physics.collection_efficiency(0.0, chain) == chain.eta_coll_h
    assert physics.collection_efficiency(math.pi / 2, chain) == pytest.approx(chain.eta_coll_v, rel=1e-15)
    with pytest.raises(DomainError):
        physics.collection_efficiency(-0.1, chain)


def test_total_detection_efficiency(chain):
    e0 = physics.EmitterParams(gamma_r=GAMMA_25)
    e90 = e0.replace(theta=math.pi / 2)
    assert physics.total_detection_efficiency(e0, chain) == pytest.approx(ETA_TOT_H, rel=1e-12)
    assert physics.total_detection_efficiency(e90, chain) == pytest.approx(ETA_TOT_V, rel=1e-12)


def test_saturation_power_backsolve(env):
    em = physics.EmitterParams(gamma_r=GAMMA_25)
    pref = physics.saturation_prefactor(743.7e-9, 2.4e-12, env)
    assert pref * GAMMA_25**2 / GAMMA_ZPL_BACKSOLVED == pytest.approx(1.6e-9, rel=1e-12)
    # P_sat scales with gamma_tot^2 / gamma_zpl
    p = physics.saturation_power(em, 2.4e-12, env)
    assert p == pytest.approx(pref * em.gamma_tot**2 / em.gamma_zpl, rel=1e-15)


def test_saturation_power_vertical_dipole(env):
    em = physics.EmitterParams(gamma_r=GAMMA_25, theta=math.pi / 2)
    with pytest.raises(SingularityError):
        physics.saturation_power(em, 2.4e-12, env)
    with pytest.raises(DomainError):
        physics.saturation_power(em.replace(theta=0.0), 0.0, env)


def test_saturation_power_tilt_scaling(env):
    em = physics.EmitterParams(gamma_r=GAMMA_25)
    p0 = physics.saturation_power(em, 2.4e-12, env)
    p60 = physics.saturation_power(em, 2.4e-12, env, theta=math.radians(60))
    assert p60 / p0 == pytest.approx(4.0, rel=1e-12)


def test_apd_reference_values():
    assert physics.apd_measured_rate(1e6, 50e-9) == pytest.approx(952380.9523809524, rel=1e-15)
    assert physics.apd_correct_rate(952380.9523809524, 50e-9) == pytest.approx(1e6, rel=1e-12)
    assert physics.apd_measured_rate(np.inf, 50e-9) == pytest.approx(2e7)


def test_apd_zero_dead_time_is_identity():
    assert physics.apd_measured_rate(123.4, 0.0) == 123.4
    assert physics.apd_correct_rate(123.4, 0.0) == 123.4


def test_apd_ceiling():
    with pytest.raises(DetectorSaturationError):
        physics.apd_correct_rate(2e7, 50e-9)
    with pytest.raises(DomainError):
        physics.apd_measured_rate(-1.0, 50e-9)


@given(n=st.floats(0, 1e12), tau=st.floats(1e-10, 1e-6))
def test_apd_round_trip(n, tau):
    m = physics.apd_measured_rate(n, tau)
    assert m < 1 / tau
    assert physics.apd_correct_rate(m, tau) == pytest.approx(n, rel=1e-6, abs=1e-9)


def test_isc_reduction_default_is_tiny():
    em = physics.EmitterParams(gamma_r=GAMMA_25)
    f = physics.isc_reduction_factor(0.5, em)
    assert 1 - f < 1e-3
    assert 1 - f == pytest.approx(0.5 * GAMMA_25 * 1e-6 * 5e-6, rel=1e-3)


def test_detected_rate_saturates(chain):
    em = physics.EmitterParams(gamma_r=GAMMA_25)
    ch = chain.replace(tau_dead=0.0, background_rate=0.0)
    hi = physics.detected_rate(em, ch, 0.0, 1e6, 1.0)
    rho = physics.excited_population(0.0, 1e6, GAMMA_25)
    expect = physics.total_detection_efficiency(em, ch) * GAMMA_25 * rho * physics.isc_reduction_factor(rho, em)
    assert hi == pytest.approx(expect, rel=1e-14)
    assert hi == pytest.approx(physics.total_detection_efficiency(em, ch) * GAMMA_25 / 2, rel=1e-3)
    with pytest.raises(DomainError):
        physics.detected_rate(em, ch, 0.0, 1.0, 0.0)


def test_emitter_validation():
    with pytest.raises(DomainError):
        physics.EmitterParams(gamma_r=0.0)
    with pytest.raises(DomainError):
        physics.EmitterParams(gamma_r=1.0, alpha=0.0)
    with pytest.raises(DomainError):
        physics.EmitterParams(gamma_r=1.0, theta=2.0)
    em = physics.EmitterParams.from_linewidth(25e6, 0.8)
    assert em.gamma_tot == pytest.approx(GAMMA_25, rel=1e-15)
    assert em.qe == pytest.approx(0.8, rel=1e-15)
    assert em.gamma_zpl == pytest.approx(0.33 * em.gamma_r, rel=1e-15)


def test_chain_validation():
    with pytest.raises(DomainError):
        physics.DetectionChain(eta_det=1.5)
    with pytest.raises(DomainError):
        physics.DetectionChain(tau_dead=-1e-9)
    with pytest.raises(DomainError):
        physics.EnvironmentParams(n_host=0.5)


def _g2_from_expm(em, s, tau):
    m = physics.rate_matrix(em, s)
    ss = null_space(m)[:, 0]
    ss = ss / ss.sum()
    out = []
    for t in tau:
        p = expm(m * t) @ np.array([1.0, 0.0, 0.0])
        out.append(p[1] / ss[1])
    return np.array(out)


@pytest.mark.parametrize("s", [0.1, 1.0, 5.0])
@pytest.mark.parametrize("phi", [1e-6, 1e-3])
def test_g2_matches_matrix_exponential(s, phi):
    em = physics.EmitterParams(gamma_r=GAMMA_25, phi_isc=phi, tau_triplet=1e-6)
    tau = np.concatenate([[0.0], np.geomspace(1e-11, 2e-5, 40)])
    ref = _g2_from_expm(em, s, tau)
    got = physics.g2_three_level(tau, em, s)
    np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-9)


def test_g2_basic_shape():
    em = physics.EmitterParams(gamma_r=GAMMA_25)
    assert physics.g2_three_level(0.0, em, 1.0) == pytest.approx(0.0, abs=1e-12)
    assert physics.g2_three_level(1.0, em, 1.0) == pytest.approx(1.0, abs=1e-9)
    lam1, _, _ = physics.g2_parameters(em, 1.0)
    assert lam1 == pytest.approx(GAMMA_25 * 2, rel=1e-4)


def test_rate_matrix_conserves_probability():
    em = physics.EmitterParams(gamma_r=GAMMA_25, phi_isc=1e-3)
    m = physics.rate_matrix(em, 2.0)
    np.testing.assert_allclose(m.sum(axis=0), 0.0, atol=1e-6)


@settings(max_examples=30)
@given(s=st.floats(0.01, 50.0), theta=st.floats(0, 1.4))
def test_saturation_power_positive_and_finite(s, theta):
    em = physics.EmitterParams(gamma_r=GAMMA_25, theta=theta)
    p = physics.saturation_power(em, 2.4e-12, physics.EnvironmentParams())
    assert math.isfinite(p) and p > 0
