"""``zpl-qe`` command-line entry point.

Subcommands::

    zpl-qe simulate --config run.toml   # synthetic scans, rasters, photons, manifest
    zpl-qe analyze  --config run.toml   # fits, both QE values, results CSV + JSON report
    zpl-qe report   --config run.toml   # ensemble plots and summary

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. ``ZPLQE_LOG`` (DEBUG, INFO, WARNING, ...) sets the
log level.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import fitkit, io, physics, pipeline, simulator
from .config import load_config
from .errors import ConfigError, DataError, DomainError, FitError, NumericalError

log = logging.getLogger("zplqe")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
MOLECULE_DIR = "molecules"


def _map(fn, items, jobs):
    """Ordered map, in a process pool when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- simulate

def _emitters(cfg):
    en = cfg.ensemble
    if not en["randomize"]:
        return [cfg.emitter] * en["size"]
    return simulator.draw_ensemble(
        en["size"],
        np.random.SeedSequence([cfg.seed, 0]),
        base=cfg.emitter,
        qe_range=(en["qe_min"], en["qe_max"]),
        theta_range=(en["theta_min_rad"], en["theta_max_rad"]),
        hold=en["hold"],
    )


def _simulate_one(task):
    cfg, index, emitter = task
    mid = f"m{index:03d}"
    beam = simulator.BeamProfile(waist=cfg.waist)
    p_sat = physics.saturation_power(emitter, beam.effective_area, cfg.env)
    sc, ra, ph = cfg.scan, cfg.raster, cfg.photons
    if sc["powers_w"] is not None:
        sat_params = np.asarray(sc["powers_w"]) * cfg.chain.eta_exc / p_sat
    else:
        sat_params = np.asarray(sc["sat_params"])
    mol = simulator.simulate_molecule(
        emitter, cfg.chain, cfg.env,
        seed=np.random.SeedSequence([cfg.seed, 1, index]),
        waist=cfg.waist,
        sat_params=sat_params,
        n_detunings=sc["n_detunings"],
        half_span_fwhm=sc["half_span_fwhm"],
        dwell=sc["dwell_s"],
        raster_sat_param=ra["sat_param"],
        raster_pitch=ra["pitch_m"],
        raster_half_extent=ra["half_extent_waists"],
        raster_dwell=ra["dwell_s"],
        with_raster=ra["enabled"],
        photon_sat_param=ph["sat_param"] if ph["duration_s"] > 0 else None,
        photon_duration=ph["duration_s"],
        emitter_id=mid,
    )
    out = cfg.output_dir / MOLECULE_DIR
    files = {"scan": f"{MOLECULE_DIR}/{mid}_scan.csv", "raster": None, "photons": None}
    io.write_scan_csv(cfg.output_dir / files["scan"], mol.scan)
    if mol.raster is not None:
        files["raster"] = f"{MOLECULE_DIR}/{mid}_raster.csv"
        io.write_raster_csv(cfg.output_dir / files["raster"], mol.raster)
    if mol.photons is not None:
        ext = "bin" if ph["format"] == "binary" else "csv"
        chans = [f"{mid}_photons_ch{k}.{ext}" for k in (0, 1)]
        for name, rec in zip(chans, mol.photons):
            io.write_photons(out / name, rec, ph["format"])
        files["photons"] = f"{MOLECULE_DIR}/{mid}_photons.json"
        io.write_json(cfg.output_dir / files["photons"], {
            "format": "zplqe-photons/1",
            "duration_s": ph["duration_s"],
            "sat_param": ph["sat_param"],
            "encoding": ph["format"],
            "channels": chans,
            "counts": [len(r) for r in mol.photons],
        })
    log.info("simulated %s (QE %.3f, theta %.1f deg)", mid, emitter.qe, math.degrees(emitter.theta))
    return {"id": mid, "files": files, "truth": mol.truth}


def cmd_simulate(cfg):
    """Write per-molecule scan, raster and photon files plus a ground-truth manifest."""
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    emitters = _emitters(cfg)
    entries = _map(_simulate_one, [(cfg, i, e) for i, e in enumerate(emitters)], cfg.jobs)
    manifest = {
        "format": "zplqe-manifest/1",
        "seed": cfg.seed,
        "rng": simulator.RNG_ALGORITHM,
        "n_molecules": len(entries),
        "chain": _chain_dict(cfg.chain),
        "environment": {"n_host": cfg.env.n_host},
        "beam": {"waist_m": cfg.waist},
        "molecules": entries,
    }
    io.write_json(cfg.output_dir / "manifest.json", manifest)
    return [cfg.output_dir / "manifest.json"]


def _chain_dict(chain):
    return {
        "eta_coll_h": chain.eta_coll_h, "eta_coll_v": chain.eta_coll_v, "eta_tr": chain.eta_tr,
        "eta_det": chain.eta_det, "kappa": chain.kappa, "eta_exc": chain.eta_exc,
        "tau_dead_s": chain.tau_dead, "background_rate_cps": chain.background_rate,
    }


# ---------------------------------------------------------------- analyze

def _read_manifest(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: malformed manifest: {exc.msg}") from exc


def _inputs(cfg):
    """(id, scan path, raster path or None, photon sidecar or None) per molecule."""
    mpath = cfg.manifest_path or cfg.input_dir / "manifest.json"
    manifest = _read_manifest(mpath) if mpath.exists() else None
    if manifest is not None:
        items = []
        for m in manifest.get("molecules", []):
            f = m["files"]
            items.append((
                m["id"],
                cfg.input_dir / f["scan"],
                cfg.input_dir / f["raster"] if f.get("raster") else None,
                cfg.input_dir / f["photons"] if f.get("photons") else None,
            ))
        return items, manifest
    scans = sorted((cfg.input_dir / MOLECULE_DIR).glob("*_scan.csv")) or sorted(
        cfg.input_dir.glob("*_scan.csv"))
    if not scans:
        raise DataError(f"{cfg.input_dir}: no scan files found")
    items = []
    for s in scans:
        mid = s.name[: -len("_scan.csv")]
        r = s.with_name(f"{mid}_raster.csv")
        p = s.with_name(f"{mid}_photons.json")
        items.append((mid, s, r if r.exists() else None, p if p.exists() else None))
    return items, None


def _g2_summary(sidecar, cfg):
    meta = _read_manifest(sidecar)
    recs = [io.read_photons(sidecar.parent / name, meta["duration_s"], k)
            for k, name in enumerate(meta["channels"])]
    hist = fitkit.autocorrelation_histogram(recs, cfg.photons["bin_width_s"], cfg.photons["max_tau_s"])
    out = {"sat_param": meta["sat_param"], "n_events": int(sum(len(r) for r in recs))}
    try:
        fit = fitkit.fit_g2(hist, sat_param=meta["sat_param"])
    except FitError as exc:
        out["error"] = str(exc)
        return out
    out.update({
        "lam1_rad_s": fit.lam1, "lam1_err": fit.lam1_err,
        "bunch_amplitude": fit.bunch_amplitude, "bunch_rate_rad_s": fit.bunch_rate,
        "gamma_tot_rad_s": fit.gamma_tot, "gamma_tot_err": fit.gamma_tot_err,
        "residual_norm": fit.residual_norm, "flags": list(fit.flags),
    })
    return out


def _failed_result(mid, scan, reason):
    nan = float("nan")
    return pipeline.MoleculeResult(
        id=mid, lambda_zpl=float(scan.metadata.get("wavelength_m", nan)), f_inf=nan, p_sat=nan,
        gamma_tot=nan, a_eff=nan, i_sat_inv=nan, qe_eff_counts=nan, qe_eff_power=nan,
        excluded=True, exclusion_reason=f"fit failed: {reason}",
        valid={"qe_eff_counts": False, "qe_eff_power": False},
    )


def _analyze_one(task):
    cfg, index, (mid, scan_path, raster_path, photon_path) = task
    scan = io.read_scan_csv(scan_path)
    raster = io.read_raster_csv(raster_path) if raster_path is not None else None
    try:
        res = pipeline.analyze_molecule(
            scan, raster, cfg.chain, cfg.env, cfg.analysis["alpha"], emitter_id=mid,
            n_bootstrap=cfg.analysis["n_bootstrap"],
            seed=np.random.SeedSequence([cfg.seed, 2, index]),
        )
    except (NumericalError, DomainError) as exc:
        log.warning("%s: %s", mid, exc)
        res = _failed_result(mid, scan, exc)
    if photon_path is not None and cfg.analysis["g2"]:
        res.diagnostics["g2"] = _g2_summary(photon_path, cfg)
    log.info("analyzed %s", mid)
    return res


def _clean(obj):
    """JSON-safe copy: NaN and inf become null, numpy scalars become floats."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _result_dict(r):
    keys = ("id", "lambda_zpl", "f_inf", "p_sat", "gamma_tot", "a_eff", "i_sat_inv",
            "qe_eff_counts", "qe_eff_power", "f_inf_err", "p_sat_err", "gamma_tot_err",
            "a_eff_err", "i_sat_inv_err", "qe_eff_counts_err", "qe_eff_power_err",
            "excluded", "exclusion_reason", "valid", "diagnostics")
    return _clean({k: getattr(r, k) for k in keys})


def score_rows(results, manifest):
    """Per-molecule ``|qe_eff - expected|`` against the simulation ground truth."""
    truth = {m["id"]: m["truth"] for m in manifest["molecules"]}
    rows = []
    for r in results:
        t = truth.get(r.id)
        if t is None:
            continue
        e1, e2 = t["expected_qe_eff_counts"], t["expected_qe_eff_power"]
        rows.append((
            r.id, e1, r.qe_eff_counts, abs(r.qe_eff_counts - e1), abs(r.qe_eff_counts / e1 - 1),
            e2, r.qe_eff_power, abs(r.qe_eff_power - e2), abs(r.qe_eff_power / e2 - 1),
        ))
    return rows


def cmd_analyze(cfg):
    """Fit every molecule and write the results CSV, JSON report and score table."""
    items, manifest = _inputs(cfg)
    if not items:
        raise DataError(f"{cfg.input_dir}: no molecules to analyze")
    results = _map(_analyze_one, [(cfg, i, it) for i, it in enumerate(items)], cfg.jobs)
    if all(r.exclusion_reason.startswith("fit failed") for r in results):
        raise NumericalError("every molecule failed to fit")
    results.sort(key=lambda r: r.id)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    io.write_results_csv(cfg.output_dir / "results.csv", results)
    io.write_json(cfg.output_dir / "report.json", {
        "format": "zplqe-analysis/1",
        "n_molecules": len(results),
        "n_excluded": sum(r.excluded for r in results),
        "alpha": cfg.analysis["alpha"],
        "chain": _chain_dict(cfg.chain),
        "molecules": [_result_dict(r) for r in results],
    })
    written = [cfg.output_dir / "results.csv", cfg.output_dir / "report.json"]
    if manifest is not None:
        io.write_table_csv(cfg.output_dir / "score.csv", "score", io.SCORE_COLUMNS,
                           score_rows(results, manifest))
        written.append(cfg.output_dir / "score.csv")
    return written


# ---------------------------------------------------------------- report

def cmd_report(cfg):
    """Ensemble plots, point tables and a text summary from a results CSV."""
    from . import report

    path = cfg.results_path or cfg.input_dir / "results.csv"
    if not path.exists():
        raise DataError(f"{path}: missing results file")
    results = io.read_results_csv(path)
    if not results:
        raise DataError(f"{path}: missing results (file has no rows)")
    cal = None
    if cfg.calibration["enabled"]:
        cal = dict(alpha_grid=cfg.calibration["alpha_grid"], kappa_grid=cfg.calibration["kappa_grid"],
                   chain=cfg.chain, env=cfg.env)
    ens = pipeline.ensemble_report(
        results, eta_ratio=cfg.chain.eta_coll_v / cfg.chain.eta_coll_h, strict=False, calibration=cal,
    )
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return report.write_report(ens, cfg.output_dir, len(results))


# ---------------------------------------------------------------- schemas

def load_schema(name):
    return json.loads(resources.files("zplqe").joinpath("schemas").joinpath(f"{name}.schema.json").read_text())


def validate_outputs(out_dir):
    """Check every JSON and CSV output under ``out_dir`` against its format."""
    import jsonschema

    by_format = {"zplqe-manifest/1": "manifest", "zplqe-photons/1": "photons",
                 "zplqe-analysis/1": "analysis", "zplqe-ensemble/1": "ensemble"}
    checked = 0
    for p in sorted(Path(out_dir).rglob("*.json")):
        doc = _read_manifest(p)
        name = by_format.get(doc.get("format")) if isinstance(doc, dict) else None
        if name is None:
            raise DataError(f"{p}: unknown document format")
        try:
            jsonschema.validate(doc, load_schema(name))
        except jsonschema.ValidationError as exc:
            where = "/".join(str(x) for x in exc.absolute_path)
            raise DataError(f"{p}: schema violation at {where or '<root>'}: {exc.message}") from None
        checked += 1
    readers = {"_scan.csv": io.read_scan_csv, "_raster.csv": io.read_raster_csv,
               "results.csv": io.read_results_csv}
    for p in sorted(Path(out_dir).rglob("*.csv")):
        for suffix, reader in readers.items():
            if p.name.endswith(suffix):
                reader(p)
                checked += 1
                break
        else:
            first = p.read_text(encoding="utf-8").split("\n", 1)[0]
            if not first.startswith("# zplqe-"):
                raise DataError(f"{p}:1: missing format line")
    return checked


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="zpl-qe", description="Quantum-efficiency estimation from ZPL saturation data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (("simulate", "generate synthetic measurement files"),
                           ("analyze", "fit measurement files"),
                           ("report", "plot and summarize results")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True, type=Path, help="TOML run configuration")
        s.add_argument("--seed", type=int, default=None, help="override run.seed")
        s.add_argument("--jobs", type=int, default=None, help="worker processes (override run.jobs)")
        s.add_argument("--validate-schemas", action="store_true",
                       help="check every output file against its documented schema")
    return p


COMMANDS = {"simulate": cmd_simulate, "analyze": cmd_analyze, "report": cmd_report}


def _setup_logging():
    level = os.environ.get("ZPLQE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command, seed=args.seed, jobs=args.jobs)
        COMMANDS[args.command](cfg)
        if args.validate_schemas:
            n = validate_outputs(cfg.output_dir)
            log.info("validated %d files", n)
    except ConfigError as exc:
        print(f"zpl-qe: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DomainError, OSError) as exc:
        print(f"zpl-qe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"zpl-qe: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
