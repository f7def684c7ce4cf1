import math
import warnings

import numpy as np
import pytest

from zplqe import physics, simulator
from zplqe.errors import DomainError
from zplqe.simulator import BeamProfile, PhotonRecord, RasterMap, ScanSeries

TWO_PI = 2 * math.pi


@pytest.fixture
def em():
    return physics.EmitterParams.from_linewidth(25e6, 0.8)


def test_default_waist_gives_reference_area():
    assert BeamProfile(simulator.DEFAULT_WAIST).effective_area == pytest.approx(2.4e-12, rel=1e-14)


def test_beam_profile():
    b = BeamProfile(1e-6, center=(1e-7, 0.0))
    assert b.relative_intensity((1e-7, 0.0)) == 1.0
    assert b.relative_intensity((1.1e-6, 0.0)) == pytest.approx(math.exp(-2), rel=1e-12)
    with pytest.raises(DomainError):
        BeamProfile(0.0)


def test_scan_series_validation():
    with pytest.raises(ValueError):
        ScanSeries([1.0, 1.0], [0.0, 0.0], [1.0, 1.0], [1, 1])
    with pytest.raises(ValueError):
        ScanSeries([1.0], [0.0], [1.0], [-1])
    s = ScanSeries([1.0, 1.0, 2.0], [0.0, 1.0, 0.0], [1.0] * 3, [1, 2, 3])
    np.testing.assert_array_equal(s.powers, [1.0, 2.0])
    assert len(s) == 3


def test_photon_record_validation():
    with pytest.raises(ValueError):
        PhotonRecord(np.array([5, 3], dtype=np.int64), 1e-6, 0)
    with pytest.raises(ValueError):
        PhotonRecord(np.array([2_000_000], dtype=np.int64), 1e-6, 0)


def test_noiseless_scan_is_expected_counts(em, chain, env):
    beam = BeamProfile(simulator.DEFAULT_WAIST)
    p_sat = physics.saturation_power(em, beam.effective_area, env)
    det = np.linspace(-5, 5, 11) * em.gamma_tot
    s = simulator.simulate_scan_series(em, chain, env, beam, [p_sat], det, 0.01, 0, noiseless=True)
    expect = physics.detected_rate(em, chain, det, p_sat, p_sat) * 0.01
    np.testing.assert_allclose(s.counts, expect, rtol=1e-15)


def test_scan_reproducible_and_seed_sensitive(em, chain, env):
    beam = BeamProfile(simulator.DEFAULT_WAIST)
    det = np.linspace(-3, 3, 21) * em.gamma_tot
    a = simulator.simulate_scan_series(em, chain, env, beam, [1e-9, 2e-9], det, 0.01, 42)
    b = simulator.simulate_scan_series(em, chain, env, beam, [1e-9, 2e-9], det, 0.01, 42)
    c = simulator.simulate_scan_series(em, chain, env, beam, [1e-9, 2e-9], det, 0.01, 43)
    np.testing.assert_array_equal(a.counts, b.counts)
    assert not np.array_equal(a.counts, c.counts)
    assert a.metadata["rng"] == "numpy.random.Philox"


def test_scan_poisson_mean(em, chain, env):
    beam = BeamProfile(simulator.DEFAULT_WAIST)
    det = np.zeros(1)
    draws = [simulator.simulate_scan_series(em, chain, env, beam, [1e-9], det, 1e-4, k).counts[0]
             for k in range(400)]
    mean = physics.detected_rate(em, chain, 0.0, 1e-9, physics.saturation_power(em, beam.effective_area, env)) * 1e-4
    assert abs(np.mean(draws) - mean) < 4 * math.sqrt(mean / 400)


def test_scan_rejects_negative_power(em, chain, env):
    with pytest.raises(DomainError):
        simulator.simulate_scan_series(em, chain, env, BeamProfile(1e-6), [-1e-9], [0.0], 0.01, 0)


def test_adaptive_detunings_cover_broadened_line():
    det = simulator.adaptive_detunings(1e8, [0.1, 10.0], n_points=11, half_span_fwhm=3.0)
    assert det.shape == (2, 11)
    assert det[1, -1] == pytest.approx(3.0 * 1e8 * math.sqrt(11.0))


def test_raster_warns_when_saturating(em, chain, env):
    beam = BeamProfile(1e-6, power_at_sample=1.0)
    grid = {"pitch": 1e-7, "nx": 5, "ny": 5}
    with pytest.warns(RuntimeWarning):
        r = simulator.simulate_raster(em, chain, env, beam, grid, 0.1, 0)
    assert r.metadata["distortion_warning"]


def test_raster_low_drive_no_warning(em, chain, env):
    beam = BeamProfile(1e-6, power_at_sample=1e-12)
    grid = {"pitch": 1e-7, "nx": 5, "ny": 5}
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        r = simulator.simulate_raster(em, chain, env, beam, grid, 0.1, 0, noiseless=True)
    assert isinstance(r, RasterMap)
    assert r.values[2, 2] == r.values.max()
    x, y = r.coordinates()
    assert x[2] == pytest.approx(0.0, abs=1e-20) and y[2] == pytest.approx(0.0, abs=1e-20)


@pytest.mark.parametrize("s", [0.3, 3.0])
def test_emission_rate_matches_closed_form(s):
    em = physics.EmitterParams.from_linewidth(25e6, 0.7, phi_isc=1e-3, tau_triplet=1e-6)
    rng = simulator.make_rng(11)
    t = simulator.simulate_emission_times(em, s, 0.02, rng)
    # closed form: radiative rate times the singlet excited population of the 3-level model
    m = physics.rate_matrix(em, s)
    from scipy.linalg import null_space

    p = null_space(m)[:, 0]
    p /= p.sum()
    expect = em.gamma_r * p[1] * 0.02
    assert abs(t.size - expect) < 4 * math.sqrt(expect)
    assert np.all(np.diff(t) > 0)


def test_photon_stream_dead_time_and_bounds(em, chain):
    r0, r1 = simulator.simulate_photon_stream(em, chain, 1.0, 2e-3, 3)
    dead = int(round(chain.tau_dead * 1e12))
    for r in (r0, r1):
        assert r.timestamps.dtype == np.int64
        assert np.all(np.diff(r.timestamps) >= dead)
        assert r.timestamps[-1] < 2e-3 * 1e12
    assert r0.channel == 0 and r1.channel == 1
    a, b = simulator.simulate_photon_stream(em, chain, 1.0, 2e-3, 3)
    np.testing.assert_array_equal(a.timestamps, r0.timestamps)


def test_photon_stream_detection_rate(em):
    ch = physics.DetectionChain(tau_dead=0.0, background_rate=0.0)
    r0, r1 = simulator.simulate_photon_stream(em, ch, 2.0, 0.02, 5)
    n = len(r0) + len(r1)
    rho = physics.excited_population(0.0, 2.0, em.gamma_tot)
    expect = physics.total_detection_efficiency(em, ch) * em.gamma_r * rho * 0.02
    assert abs(n - expect) < 4 * math.sqrt(expect)
    assert abs(len(r0) - len(r1)) < 4 * math.sqrt(n)


def test_expected_qe_eff(em, chain):
    e = em.replace(theta=math.radians(60))
    q1, q2 = simulator.expected_qe_eff(e, chain)
    c2 = 0.25
    assert q1 == pytest.approx(0.8 * (c2 + (1 - c2) / 9), rel=1e-12)
    assert q2 == pytest.approx(0.8 * c2, rel=1e-12)


def test_simulate_molecule_truth(em, chain, env):
    m = simulator.simulate_molecule(em, chain, env, seed=1, n_detunings=15)
    assert m.truth["a_eff_m2"] == pytest.approx(2.4e-12)
    assert m.raster.values.shape == (61, 61)
    assert m.scan.powers.size == 8
    assert m.photons is None


@pytest.mark.parametrize("hold", ["gamma_r", "gamma_tot"])
def test_draw_ensemble(hold):
    base = physics.EmitterParams(gamma_r=TWO_PI * 20e6)
    ems = simulator.draw_ensemble(50, 9, base=base, hold=hold)
    qe = np.array([e.qe for e in ems])
    th = np.array([e.theta for e in ems])
    assert qe.min() >= 0.5 and qe.max() <= 1.0
    assert th.min() >= 0 and th.max() <= math.radians(85)
    if hold == "gamma_r":
        assert all(e.gamma_r == base.gamma_r for e in ems)
    else:
        np.testing.assert_allclose([e.gamma_tot for e in ems], base.gamma_tot, rtol=1e-12)
    with pytest.raises(DomainError):
        simulator.draw_ensemble(0, 1)
