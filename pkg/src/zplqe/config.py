"""Run configuration: TOML sections with SI units in the key names.

Unknown sections or keys are rejected, as are values that violate the
invariants of the physical parameter blocks. Errors carry the dotted key
(``scan.powers_w``) so the CLI can name the offending entry.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import physics
from .errors import ConfigError
from .simulator import DEFAULT_WAIST

MODES = ("simulate", "analyze", "report")

# section -> {key: (type, default)}; "required" marks keys without a default
_REQUIRED = object()
_SCHEMA = {
    "run": {
        "mode": (str, None),
        "seed": (int, 0),
        "jobs": (int, 1),
        "output_dir": (str, _REQUIRED),
        "input_dir": (str, None),
        "results_path": (str, None),
        "manifest_path": (str, None),
    },
    "emitter": {
        "gamma_r_rad_s": (float, 2 * math.pi * 20e6),
        "gamma_nr_rad_s": (float, 0.0),
        "wavelength_m": (float, 743.7e-9),
        "alpha": (float, 0.33),
        "theta_rad": (float, 0.0),
        "phi_isc": (float, 1e-6),
        "tau_triplet_s": (float, 5e-6),
    },
    "chain": {
        "eta_coll_h": (float, 0.09),
        "eta_coll_v": (float, 0.01),
        "eta_tr": (float, 0.69),
        "eta_det": (float, 0.55),
        "kappa": (float, 0.8),
        "eta_exc": (float, 1.0),
        "tau_dead_s": (float, 50e-9),
        "background_rate_cps": (float, 100.0),
    },
    "environment": {"n_host": (float, 1.6)},
    "beam": {"waist_m": (float, DEFAULT_WAIST)},
    "scan": {
        "powers_w": (list, None),
        "sat_params": (list, [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0]),
        "n_detunings": (int, 41),
        "half_span_fwhm": (float, 3.0),
        "dwell_s": (float, 0.01),
    },
    "raster": {
        "enabled": (bool, True),
        "sat_param": (float, 0.02),
        "pitch_m": (float, None),
        "half_extent_waists": (float, 3.0),
        "dwell_s": (float, 0.2),
    },
    "photons": {
        "duration_s": (float, 0.0),
        "sat_param": (float, 0.5),
        "format": (str, "binary"),
        "bin_width_s": (float, 0.5e-9),
        "max_tau_s": (float, 100e-9),
    },
    "ensemble": {
        "size": (int, 1),
        "randomize": (bool, True),
        "qe_min": (float, 0.5),
        "qe_max": (float, 1.0),
        "theta_min_rad": (float, 0.0),
        "theta_max_rad": (float, math.radians(85.0)),
        "hold": (str, "gamma_r"),
    },
    "analysis": {
        "alpha": (float, 0.33),
        "n_bootstrap": (int, 100),
        "g2": (bool, True),
    },
    "calibration": {
        "enabled": (bool, True),
        "alpha_grid": (list, [0.2, 0.33, 0.5]),
        "kappa_grid": (list, [0.6, 0.8, 1.0]),
    },
}


@dataclass
class RunConfig:
    """Validated configuration for one CLI invocation."""

    mode: str
    seed: int
    jobs: int
    output_dir: Path
    input_dir: Path | None
    results_path: Path | None
    manifest_path: Path | None
    emitter: physics.EmitterParams
    chain: physics.DetectionChain
    env: physics.EnvironmentParams
    waist: float
    scan: dict
    raster: dict
    photons: dict
    ensemble: dict
    analysis: dict
    calibration: dict
    source: Path | None = None
    raw: dict = field(default_factory=dict)


def _coerce(key, typ, value):
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}", key)
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(f"{key}: must be finite", key)
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", key)
        return value
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}", key)
        return value
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}", key)
        return value
    if typ is list:
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{key}: expected a non-empty array", key)
        out = []
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ConfigError(f"{key}: entries must be finite numbers, got {v!r}", key)
            out.append(float(v))
        return out
    raise AssertionError(typ)


def _sections(doc):
    unknown = sorted(set(doc) - set(_SCHEMA))
    if unknown:
        raise ConfigError(f"unknown section {unknown[0]!r}", unknown[0])
    out = {}
    for sec, keys in _SCHEMA.items():
        given = doc.get(sec, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{sec}: expected a table", sec)
        bad = sorted(set(given) - set(keys))
        if bad:
            raise ConfigError(f"unknown key {sec}.{bad[0]}", f"{sec}.{bad[0]}")
        vals = {}
        for k, (typ, default) in keys.items():
            dotted = f"{sec}.{k}"
            if k in given:
                vals[k] = _coerce(dotted, typ, given[k])
            elif default is _REQUIRED:
                raise ConfigError(f"missing required key {dotted}", dotted)
            else:
                vals[k] = list(default) if isinstance(default, list) else default
        out[sec] = vals
    return out


def _positive(sec, vals, *keys, allow_zero=False):
    for k in keys:
        v = vals[k]
        if v is None:
            continue
        items = v if isinstance(v, list) else [v]
        for x in items:
            if x < 0 or (x == 0 and not allow_zero):
                word = "non-negative" if allow_zero else "positive"
                raise ConfigError(f"{sec}.{k}: values must be {word}, got {x!r}", f"{sec}.{k}")


def _block(section, builder, mapping):
    try:
        return builder(**mapping)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}: {exc}", section) from exc


def parse_config(doc, mode, source=None, seed=None, jobs=None):
    """Validate a decoded TOML document for ``mode``. Returns a :class:`RunConfig`."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}", "run.mode")
    s = _sections(doc)
    run = s["run"]
    if run["mode"] is not None and run["mode"] != mode:
        raise ConfigError(f"run.mode is {run['mode']!r} but the command is {mode!r}", "run.mode")

    e = s["emitter"]
    emitter = _block("emitter", physics.EmitterParams, dict(
        gamma_r=e["gamma_r_rad_s"], gamma_nr=e["gamma_nr_rad_s"], lambda_zpl=e["wavelength_m"],
        alpha=e["alpha"], theta=e["theta_rad"], phi_isc=e["phi_isc"], tau_triplet=e["tau_triplet_s"],
    ))
    c = s["chain"]
    chain = _block("chain", physics.DetectionChain, dict(
        eta_coll_h=c["eta_coll_h"], eta_coll_v=c["eta_coll_v"], eta_tr=c["eta_tr"],
        eta_det=c["eta_det"], kappa=c["kappa"], eta_exc=c["eta_exc"],
        tau_dead=c["tau_dead_s"], background_rate=c["background_rate_cps"],
    ))
    env = _block("environment", physics.EnvironmentParams, dict(n_host=s["environment"]["n_host"]))

    _positive("beam", s["beam"], "waist_m")
    sc = s["scan"]
    _positive("scan", sc, "powers_w", "sat_params", "half_span_fwhm", "dwell_s")
    for name in ("powers_w", "sat_params"):
        if sc[name] is not None and len(set(sc[name])) < 4:
            raise ConfigError(f"scan.{name}: need at least 4 distinct powers", f"scan.{name}")
    if sc["n_detunings"] < 8:
        raise ConfigError("scan.n_detunings: need at least 8 points", "scan.n_detunings")
    ra = s["raster"]
    _positive("raster", ra, "sat_param", "pitch_m", "half_extent_waists", "dwell_s")
    ph = s["photons"]
    _positive("photons", ph, "sat_param", "bin_width_s", "max_tau_s")
    _positive("photons", ph, "duration_s", allow_zero=True)
    if ph["format"] not in ("binary", "csv"):
        raise ConfigError("photons.format must be 'binary' or 'csv'", "photons.format")
    en = s["ensemble"]
    if en["size"] < 1:
        raise ConfigError("ensemble.size must be at least 1", "ensemble.size")
    if not 0 < en["qe_min"] <= en["qe_max"] <= 1:
        raise ConfigError("ensemble: need 0 < qe_min <= qe_max <= 1", "ensemble.qe_min")
    if not 0 <= en["theta_min_rad"] <= en["theta_max_rad"] < math.pi / 2:
        raise ConfigError("ensemble: need 0 <= theta_min_rad <= theta_max_rad < pi/2",
                          "ensemble.theta_max_rad")
    if en["hold"] not in ("gamma_r", "gamma_tot"):
        raise ConfigError("ensemble.hold must be 'gamma_r' or 'gamma_tot'", "ensemble.hold")
    an = s["analysis"]
    if not 0 <= an["alpha"] < 1:
        raise ConfigError("analysis.alpha must lie in [0, 1)", "analysis.alpha")
    if an["n_bootstrap"] != 0 and an["n_bootstrap"] < 100:
        raise ConfigError("analysis.n_bootstrap must be 0 or at least 100", "analysis.n_bootstrap")
    cal = s["calibration"]
    for a in cal["alpha_grid"]:
        if not 0 <= a < 1:
            raise ConfigError("calibration.alpha_grid entries must lie in [0, 1)", "calibration.alpha_grid")
    _positive("calibration", cal, "kappa_grid")

    jobs = run["jobs"] if jobs is None else jobs
    if jobs < 1:
        raise ConfigError("run.jobs must be at least 1", "run.jobs")
    seed = run["seed"] if seed is None else seed
    if seed < 0:
        raise ConfigError("run.seed must be non-negative", "run.seed")

    base = Path(source).parent if source is not None else Path.cwd()

    def resolve(p):
        return None if p is None else (base / p).resolve()

    output_dir = resolve(run["output_dir"])
    input_dir = resolve(run["input_dir"])
    results_path = resolve(run["results_path"])
    manifest_path = resolve(run["manifest_path"])
    if mode == "analyze" and input_dir is None:
        raise ConfigError("run.input_dir is required for analyze", "run.input_dir")
    if mode == "report" and results_path is None and input_dir is None:
        raise ConfigError("run.results_path (or run.input_dir) is required for report",
                          "run.results_path")
    named = {k: v for k, v in (("run.output_dir", output_dir), ("run.input_dir", input_dir),
                                ("run.results_path", results_path),
                                ("run.manifest_path", manifest_path)) if v is not None}
    seen = {}
    for k, v in named.items():
        if v in seen:
            raise ConfigError(f"{k} and {seen[v]} refer to the same path", k)
        seen[v] = k

    return RunConfig(
        mode=mode,
        seed=seed,
        jobs=jobs,
        output_dir=output_dir,
        input_dir=input_dir,
        results_path=results_path,
        manifest_path=manifest_path,
        emitter=emitter,
        chain=chain,
        env=env,
        waist=s["beam"]["waist_m"],
        scan=sc,
        raster=ra,
        photons=ph,
        ensemble=en,
        analysis=an,
        calibration=cal,
        source=Path(source) if source is not None else None,
        raw=s,
    )


def load_config(path, mode, seed=None, jobs=None):
    """Read and validate a TOML configuration file."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", None) from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}", None) from exc
    return parse_config(doc, mode, source=path, seed=seed, jobs=jobs)
