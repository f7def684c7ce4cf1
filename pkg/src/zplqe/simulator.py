"""Synthetic measurement records with known ground truth.

Three record types are produced: frequency-scan series at several powers,
low-power raster maps of the excitation spot, and two-channel photon
time-tag streams from a Hanbury-Brown-Twiss arrangement. All randomness is
drawn from a Philox counter-based generator, so a given seed reproduces the
same record on every platform.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels, physics
from .errors import DomainError

__all__ = [
    "RNG_ALGORITHM",
    "make_rng",
    "BeamProfile",
    "ScanSeries",
    "RasterMap",
    "PhotonRecord",
    "gaussian_beam_intensity",
    "adaptive_detunings",
    "simulate_scan_series",
    "simulate_raster",
    "simulate_emission_times",
    "simulate_photon_stream",
    "PS_PER_S",
    "SyntheticMolecule",
    "expected_qe_eff",
    "simulate_molecule",
    "draw_ensemble",
]

RNG_ALGORITHM = "numpy.random.Philox"
PS_PER_S = 10**12

# Above this saturation parameter a raster map no longer maps intensity linearly.
RASTER_DISTORTION_LIMIT = 0.1

# Waist whose Gaussian effective area is 2.4 um^2.
DEFAULT_WAIST = math.sqrt(2 * 2.4e-12 / math.pi)


def make_rng(seed):
    """Philox generator from an int or :class:`numpy.random.SeedSequence`."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class BeamProfile:
    """Fundamental Gaussian focal spot.

    ``waist`` is the 1/e^2 intensity radius (m), ``center`` the spot position
    in the sample plane (m) and ``power_at_sample`` the source-side power (W).
    """

    waist: float
    center: tuple = (0.0, 0.0)
    power_at_sample: float = 0.0

    def __post_init__(self):
        if not self.waist > 0:
            raise DomainError(f"waist must be positive, got {self.waist!r}")
        if not self.power_at_sample >= 0:
            raise DomainError("power_at_sample must be non-negative")

    @property
    def effective_area(self):
        """Integral of I over its peak value, pi w0^2 / 2."""
        return math.pi * self.waist**2 / 2.0

    def relative_intensity(self, r):
        """I(r) / I(center)."""
        dx = np.asarray(r[0], dtype=float) - self.center[0]
        dy = np.asarray(r[1], dtype=float) - self.center[1]
        return np.exp(-2.0 * (dx * dx + dy * dy) / self.waist**2)


def gaussian_beam_intensity(r, beam):
    """Intensity (W/m^2) of ``beam`` at position ``r = (x, y)``."""
    peak = 2.0 * beam.power_at_sample / (math.pi * beam.waist**2)
    return peak * beam.relative_intensity(r)


@dataclass
class ScanSeries:
    """Detected counts versus (source power, detuning).

    Rows are stored as aligned 1-D arrays. ``detuning`` is in rad/s.
    ``counts`` are integers except for records generated with
    ``noiseless=True``, which hold the expected (float) counts.
    """

    source_power: np.ndarray
    detuning: np.ndarray
    dwell_time: np.ndarray
    counts: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.source_power = np.asarray(self.source_power, dtype=float)
        self.detuning = np.asarray(self.detuning, dtype=float)
        self.dwell_time = np.asarray(self.dwell_time, dtype=float)
        self.counts = np.asarray(self.counts)
        n = self.source_power.size
        if not (self.detuning.size == self.dwell_time.size == self.counts.size == n):
            raise DomainError("scan columns must have equal length")
        if np.any(self.dwell_time <= 0):
            raise DomainError("dwell_time must be positive")
        if np.any(self.counts < 0):
            raise DomainError("counts must be non-negative")
        for p in self.powers:
            d = self.detuning[self.source_power == p]
            if np.any(np.diff(d) <= 0):
                raise DomainError(f"detunings at power {p!r} are not strictly increasing")

    def __len__(self):
        return self.source_power.size

    @property
    def powers(self):
        """Distinct source powers in order of first appearance."""
        _, idx = np.unique(self.source_power, return_index=True)
        return self.source_power[np.sort(idx)]

    def rows(self, power):
        return np.flatnonzero(self.source_power == power)


@dataclass
class RasterMap:
    """Counts recorded while the focus is stepped over the molecule.

    ``values[iy, ix]`` belongs to beam position
    ``(origin[0] + ix * pitch, origin[1] + iy * pitch)``.
    """

    pitch: float
    origin: tuple
    values: np.ndarray
    dwell_time: float
    source_power: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not self.pitch > 0:
            raise DomainError("pitch must be positive")
        if self.values.ndim != 2:
            raise DomainError("raster values must be a 2-D array")
        if np.any(self.values < 0):
            raise DomainError("raster counts must be non-negative")
        if not self.dwell_time > 0:
            raise DomainError("dwell_time must be positive")
        self.origin = (float(self.origin[0]), float(self.origin[1]))

    @property
    def shape(self):
        return self.values.shape

    def coordinates(self):
        ny, nx = self.values.shape
        x = self.origin[0] + self.pitch * np.arange(nx)
        y = self.origin[1] + self.pitch * np.arange(ny)
        return x, y


@dataclass
class PhotonRecord:
    """Detection times of one detector in integer picoseconds."""

    timestamps: np.ndarray
    duration: float
    channel: int

    def __post_init__(self):
        self.timestamps = np.ascontiguousarray(self.timestamps, dtype=np.int64)
        if self.timestamps.size:
            if np.any(np.diff(self.timestamps) <= 0):
                raise DomainError("timestamps must be strictly increasing")
            if self.timestamps[0] < 0 or self.timestamps[-1] >= self.duration * PS_PER_S:
                raise DomainError("timestamps must lie in [0, duration)")
        if self.channel not in (0, 1):
            raise DomainError("channel must be 0 or 1")

    def __len__(self):
        return self.timestamps.size

    @property
    def rate(self):
        return self.timestamps.size / self.duration


def adaptive_detunings(gamma_tot, sat_params, n_points=41, half_span_fwhm=3.0):
    """Per-power detuning grids covering +-``half_span_fwhm`` broadened linewidths."""
    sat_params = np.asarray(sat_params, dtype=float)
    fwhm = physics.power_broadened_fwhm(gamma_tot, sat_params)
    u = np.linspace(-1.0, 1.0, n_points)
    return np.atleast_2d(fwhm).T * half_span_fwhm * u


def _molecule_psat(emitter, env, beam):
    return physics.saturation_power(emitter, beam.effective_area, env)


def simulate_scan_series(
    emitter,
    chain,
    env,
    beam,
    powers,
    detunings,
    dwell,
    seed,
    mol_position=(0.0, 0.0),
    noiseless=False,
    emitter_id="",
):
    """Frequency scans of one molecule at each source power.

    Parameters
    ----------
    powers : sequence of float
        Source-side powers (W). The power at the molecule is
        ``eta_exc * P * I(mol)/I(center)`` for the given ``beam``.
    detunings : array_like
        Either one grid (rad/s) shared by all powers, or a 2-D array with one
        row per power.
    dwell : float
        Integration time per detuning point (s).
    noiseless : bool
        Store expected counts instead of Poisson draws.
    """
    powers = np.asarray(powers, dtype=float)
    if powers.size == 0:
        raise DomainError("powers must be non-empty")
    if np.any(powers < 0):
        raise DomainError("powers must be non-negative")
    if not dwell > 0:
        raise DomainError("dwell must be positive")
    det = np.asarray(detunings, dtype=float)
    if det.ndim == 1:
        det = np.broadcast_to(det, (powers.size, det.size))
    if det.shape[0] != powers.size or det.shape[1] == 0:
        raise DomainError("detunings must be one grid or one row per power")

    p_sat = _molecule_psat(emitter, env, beam)
    i_rel = float(beam.relative_intensity(mol_position))
    p_mol = chain.eta_exc * powers * i_rel
    rates = physics.detected_rate(emitter, chain, det, p_mol[:, None], p_sat)
    mean = np.asarray(rates) * dwell

    if noiseless:
        counts = mean
    else:
        counts = make_rng(seed).poisson(mean)
    n_det = det.shape[1]
    meta = {
        "seed": _seed_repr(seed),
        "emitter_id": emitter_id,
        "rng": RNG_ALGORITHM,
        "wavelength_m": emitter.lambda_zpl,
        "noiseless": bool(noiseless),
    }
    return ScanSeries(
        source_power=np.repeat(powers, n_det),
        detuning=det.ravel(),
        dwell_time=np.full(powers.size * n_det, float(dwell)),
        counts=counts.ravel(),
        metadata=meta,
    )


def simulate_raster(
    emitter,
    chain,
    env,
    beam,
    grid,
    dwell,
    seed,
    mol_position=(0.0, 0.0),
    noiseless=False,
    emitter_id="",
):
    """Fluorescence map recorded while stepping the focus over a fixed molecule.

    ``grid`` holds ``pitch``, ``nx``, ``ny`` and ``origin``; pixel ``(ix, iy)``
    places the beam centre at ``origin + pitch * (ix, iy)``. The map follows
    the local intensity only while the drive stays well below saturation; a
    ``RuntimeWarning`` is issued (and flagged in the metadata) when the
    saturation parameter at the brightest pixel exceeds 0.1.
    """
    pitch = float(grid["pitch"])
    nx, ny = int(grid["nx"]), int(grid["ny"])
    ox, oy = grid.get("origin", (-(nx - 1) * pitch / 2, -(ny - 1) * pitch / 2))
    if not dwell > 0:
        raise DomainError("dwell must be positive")
    p_sat = _molecule_psat(emitter, env, beam)
    xs = ox + pitch * np.arange(nx)
    ys = oy + pitch * np.arange(ny)
    bx, by = np.meshgrid(xs, ys)
    dx = mol_position[0] - bx
    dy = mol_position[1] - by
    i_rel = np.exp(-2.0 * (dx * dx + dy * dy) / beam.waist**2)
    s_map = chain.eta_exc * beam.power_at_sample * i_rel / p_sat
    s_max = float(s_map.max())
    distorted = s_max > RASTER_DISTORTION_LIMIT
    if distorted:
        warnings.warn(
            f"raster drive reaches S={s_max:.3g} > {RASTER_DISTORTION_LIMIT}; "
            "the map is distorted by saturation",
            RuntimeWarning,
            stacklevel=2,
        )
    rate = physics.detected_rate(emitter, chain, 0.0, s_map * p_sat, p_sat)
    mean = np.asarray(rate) * dwell
    values = mean if noiseless else make_rng(seed).poisson(mean)
    meta = {
        "seed": _seed_repr(seed),
        "emitter_id": emitter_id,
        "rng": RNG_ALGORITHM,
        "max_sat_param": s_max,
        "distortion_warning": distorted,
        "noiseless": bool(noiseless),
    }
    return RasterMap(
        pitch=pitch,
        origin=(ox, oy),
        values=values,
        dwell_time=float(dwell),
        source_power=beam.power_at_sample,
        metadata=meta,
    )


def _mean_cycle_time(emitter, r):
    g = emitter.gamma_tot
    # Mean time from S0 to the next S1 decay, plus the mean shelving delay.
    return (2 * r + g) / (g * r) + emitter.phi_isc * emitter.tau_triplet


def simulate_emission_times(emitter, sat_param, duration, rng, max_chunk=2_000_000):
    """Exact Monte Carlo of the three-level rate model; returns emission times (s).

    Each cycle starts in S0. The number of S0->S1 excitations before S1
    decays spontaneously is geometric with success probability
    ``gamma_tot / (R + gamma_tot)``; the time spent is a sum of exponential
    dwell times and therefore a sum of two gamma variates. The decay branches
    into the triplet (yield ``phi_isc``, followed by an exponential shelving
    delay) or back to S0, emitting a photon with the radiative share of the
    remaining decay rate.
    """
    if sat_param < 0:
        raise DomainError("sat_param must be non-negative")
    if not duration > 0:
        raise DomainError("duration must be positive")
    if sat_param == 0:
        return np.empty(0)
    rng = make_rng(rng)
    r = physics.pump_rate(emitter, sat_param)
    g = emitter.gamma_tot
    p_decay = g / (r + g)
    phi = emitter.phi_isc
    gamma_eg = g * (1.0 - phi)
    p_photon = min(1.0, emitter.gamma_r / gamma_eg)
    mean_cycle = _mean_cycle_time(emitter, r)

    out = []
    t0 = 0.0
    while t0 < duration:
        n = int(min(max_chunk, math.ceil((duration - t0) / mean_cycle * 1.02) + 64))
        k = rng.geometric(p_decay, size=n).astype(float)
        t_decay = rng.standard_gamma(k) / r + rng.standard_gamma(k) / (r + g)
        u = rng.random(n)
        shelved = u < phi
        photon = (~shelved) & (u < phi + (1.0 - phi) * p_photon)
        delay = np.zeros(n)
        n_shelved = int(shelved.sum())
        if n_shelved:
            delay[shelved] = rng.exponential(emitter.tau_triplet, size=n_shelved)
        cycle = t_decay + delay
        start = t0 + np.concatenate(([0.0], np.cumsum(cycle[:-1])))
        t_emit = (start + t_decay)[photon]
        out.append(t_emit[t_emit < duration])
        t0 = start[-1] + cycle[-1]
    return np.concatenate(out) if out else np.empty(0)


def simulate_photon_stream(emitter, chain, sat_param, duration, seed, emission_times=None):
    """Two HBT detector records for resonant drive at saturation parameter ``S``.

    Every radiative photon is detected with probability ``eta_tot`` and sent
    to either detector with probability 1/2. Each detector adds background
    at ``background_rate / 2`` and applies its own non-paralyzable dead time.
    Timestamps are floored to integer picoseconds; coincident ticks within a
    channel are merged.
    """
    rng = make_rng(seed)
    if emission_times is None:
        emission_times = simulate_emission_times(emitter, sat_param, duration, rng)
    eta = physics.total_detection_efficiency(emitter, chain)
    detected = emission_times[rng.random(emission_times.size) < eta]
    channel = rng.integers(0, 2, size=detected.size)
    dead_ps = int(round(chain.tau_dead * PS_PER_S))
    records = []
    for ch in (0, 1):
        n_bg = rng.poisson(0.5 * chain.background_rate * duration)
        bg = rng.random(n_bg) * duration
        t = np.concatenate((detected[channel == ch], bg))
        ps = np.unique(np.floor(t * PS_PER_S).astype(np.int64))
        ps = ps[ps < round(duration * PS_PER_S)]
        ps = ps[kernels.deadtime_mask(ps, dead_ps)]
        records.append(PhotonRecord(ps, duration, ch))
    return records[0], records[1]


def _seed_repr(seed):
    if isinstance(seed, np.random.SeedSequence):
        return {"entropy": str(seed.entropy), "spawn_key": list(seed.spawn_key)}
    if isinstance(seed, np.random.Generator):
        return None
    return seed


@dataclass
class SyntheticMolecule:
    """Generated records of one molecule plus the ground truth behind them."""

    emitter: physics.EmitterParams
    scan: ScanSeries
    raster: RasterMap | None
    mol_position: tuple
    p_sat: float
    truth: dict
    photons: tuple | None = None


def expected_qe_eff(emitter, chain):
    """Orientation-weighted QE values both methods should return."""
    counts = emitter.qe * physics.collection_efficiency(emitter.theta, chain) / chain.eta_coll_h
    power = emitter.qe * math.cos(emitter.theta) ** 2
    return float(counts), float(power)


def simulate_molecule(
    emitter,
    chain,
    env,
    seed,
    waist=DEFAULT_WAIST,
    sat_params=(0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0),
    n_detunings=41,
    half_span_fwhm=3.0,
    dwell=0.01,
    raster_sat_param=0.02,
    raster_pitch=None,
    raster_half_extent=3.0,
    raster_dwell=0.2,
    mol_position=(0.0, 0.0),
    with_raster=True,
    photon_sat_param=None,
    photon_duration=0.0,
    noiseless=False,
    emitter_id="",
    analysis_chain=None,
):
    """Scan series, raster map and optional photon stream for one molecule.

    Scan powers are chosen per molecule as ``sat_params`` times its source-side
    saturation power, mirroring an experiment that adapts the power range to
    each molecule. The raster runs at ``raster_sat_param`` on a grid of pitch
    ``waist / 10`` (default) extending ``raster_half_extent`` waists around
    ``mol_position``. ``analysis_chain`` sets the efficiencies used for the
    expected QE values in ``truth`` (default: ``chain``).

    The default waist gives ``A_eff = 2.4 um^2``.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_scan, s_raster, s_photon = ss.spawn(3)
    beam = BeamProfile(waist=waist, center=mol_position)
    p_sat = physics.saturation_power(emitter, beam.effective_area, env)
    sat = np.asarray(sat_params, dtype=float)
    powers = sat * p_sat / chain.eta_exc
    det = adaptive_detunings(emitter.gamma_tot, sat, n_detunings, half_span_fwhm)
    scan = simulate_scan_series(
        emitter, chain, env, beam, powers, det, dwell, s_scan,
        mol_position=mol_position, noiseless=noiseless, emitter_id=emitter_id,
    )
    raster = None
    if with_raster:
        pitch = raster_pitch if raster_pitch is not None else waist / 10.0
        half = int(math.ceil(raster_half_extent * waist / pitch))
        grid = {
            "pitch": pitch,
            "nx": 2 * half + 1,
            "ny": 2 * half + 1,
            "origin": (mol_position[0] - half * pitch, mol_position[1] - half * pitch),
        }
        rbeam = BeamProfile(waist=waist, power_at_sample=raster_sat_param * p_sat / chain.eta_exc)
        raster = simulate_raster(
            emitter, chain, env, rbeam, grid, raster_dwell, s_raster,
            mol_position=mol_position, noiseless=noiseless, emitter_id=emitter_id,
        )
    photons = None
    if photon_sat_param is not None and photon_duration > 0:
        photons = simulate_photon_stream(emitter, chain, photon_sat_param, photon_duration, s_photon)
    qe_c, qe_p = expected_qe_eff(emitter, analysis_chain or chain)
    truth = {
        "emitter_id": emitter_id,
        "qe": emitter.qe,
        "theta_rad": emitter.theta,
        "gamma_r_rad_s": emitter.gamma_r,
        "gamma_nr_rad_s": emitter.gamma_nr,
        "gamma_tot_rad_s": emitter.gamma_tot,
        "wavelength_m": emitter.lambda_zpl,
        "alpha": emitter.alpha,
        "phi_isc": emitter.phi_isc,
        "tau_triplet_s": emitter.tau_triplet,
        "p_sat_w": p_sat,
        "a_eff_m2": beam.effective_area,
        "f_inf": float(physics.total_detection_efficiency(emitter, chain) * emitter.gamma_r / 2),
        "mol_position_m": [float(mol_position[0]), float(mol_position[1])],
        "expected_qe_eff_counts": qe_c,
        "expected_qe_eff_power": qe_p,
    }
    return SyntheticMolecule(emitter, scan, raster, tuple(mol_position), p_sat, truth, photons)


def draw_ensemble(
    n,
    seed,
    base=None,
    qe_range=(0.5, 1.0),
    theta_range=(0.0, math.radians(85.0)),
    hold="gamma_r",
):
    """Random emitters with uniform QE and dipole angle.

    ``hold="gamma_r"`` keeps the radiative rate of ``base`` fixed (linewidth
    then scales as 1/QE); ``hold="gamma_tot"`` keeps the total rate fixed.
    """
    if n < 1:
        raise DomainError("ensemble size must be at least 1")
    if hold not in ("gamma_r", "gamma_tot"):
        raise DomainError("hold must be 'gamma_r' or 'gamma_tot'")
    base = base or physics.EmitterParams(gamma_r=2 * math.pi * 20e6)
    rng = make_rng(seed)
    qe = rng.uniform(qe_range[0], qe_range[1], size=n)
    theta = rng.uniform(theta_range[0], theta_range[1], size=n)
    out = []
    for q, t in zip(qe, theta):
        if hold == "gamma_r":
            g_r = base.gamma_r
            g_tot = g_r / q
        else:
            g_tot = base.gamma_tot
            g_r = q * g_tot
        out.append(base.replace(gamma_r=g_r, gamma_nr=max(g_tot - g_r, 0.0), theta=float(t)))
    return out
