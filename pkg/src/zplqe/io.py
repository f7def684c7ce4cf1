"""On-disk formats for scans, rasters, photon records and results.

Every CSV starts with ``#`` comment lines. The first names the format
(``# zplqe-scan v1``), a ``# meta: {...}`` line carries JSON metadata and a
trailing ``# rows=N`` footer guards against truncation. Photon records are
an 8-byte magic header followed by little-endian uint64 picosecond stamps.
All writes go to a temporary file that is renamed into place.
"""
from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError
from .simulator import PhotonRecord, RasterMap, ScanSeries

SCAN_COLUMNS = ("source_power_w", "detuning_hz", "dwell_s", "counts")
RASTER_COLUMNS = ("x_m", "y_m", "counts")
PHOTON_CSV_COLUMNS = ("timestamp_ps",)
RESULT_COLUMNS = (
    "id",
    "lambda_zpl_m",
    "f_inf_cps",
    "f_inf_err",
    "p_sat_w",
    "p_sat_err",
    "gamma_tot_rad_s",
    "gamma_tot_err",
    "a_eff_m2",
    "a_eff_err",
    "i_sat_inv_m2_per_w",
    "i_sat_inv_err",
    "qe_eff_counts",
    "qe_eff_counts_err",
    "qe_eff_power",
    "qe_eff_power_err",
    "excluded",
    "exclusion_reason",
    "valid_counts",
    "valid_power",
)
SCORE_COLUMNS = (
    "id",
    "expected_qe_eff_counts",
    "qe_eff_counts",
    "abs_err_counts",
    "rel_err_counts",
    "expected_qe_eff_power",
    "qe_eff_power",
    "abs_err_power",
    "rel_err_power",
)
PHOTON_MAGIC = b"ZPLQETT1"

TWO_PI = 2.0 * math.pi


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return repr(x)
    return str(x)


def _render_csv(kind, columns, rows, meta):
    buf = _io.StringIO()
    buf.write(f"# zplqe-{kind} v1\n")
    if meta is not None:
        buf.write("# meta: " + json.dumps(meta, sort_keys=True, default=_json_default) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    n = 0
    for row in rows:
        w.writerow([_fmt(v) for v in row])
        n += 1
    buf.write(f"# rows={n}\n")
    return buf.getvalue()


def _parse_csv(path, kind, columns):
    """Return (meta, list of (lineno, fields)). Raises DataError with line numbers."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read: {exc}") from exc
    meta = {}
    header = None
    rows = []
    footer = None
    lines = text.splitlines()
    if text and not text.endswith("\n"):
        raise DataError(f"{path}:{len(lines)}: file is truncated (incomplete last line)")
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("meta:"):
                try:
                    meta = json.loads(body[5:])
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: malformed metadata: {exc}") from exc
            elif body.startswith("rows="):
                footer = (lineno, int(body[5:]))
            elif body.startswith("zplqe-") and body.split()[0] != f"zplqe-{kind}":
                raise DataError(f"{path}:{lineno}: expected a zplqe-{kind} file, found {body}")
            continue
        fields = next(csv.reader([line]))
        if header is None:
            if tuple(f.strip() for f in fields) != tuple(columns):
                raise DataError(
                    f"{path}:{lineno}: header {fields} does not match expected {list(columns)}"
                )
            header = lineno
            continue
        if len(fields) != len(columns):
            raise DataError(
                f"{path}:{lineno}: expected {len(columns)} columns, found {len(fields)}"
            )
        rows.append((lineno, fields))
    if header is None:
        raise DataError(f"{path}:{len(lines) + 1}: missing header line")
    if footer is not None and footer[1] != len(rows):
        raise DataError(
            f"{path}:{footer[0]}: footer announces {footer[1]} rows, found {len(rows)}"
        )
    return meta, rows


def _num(path, lineno, col, text, integer=False):
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{path}:{lineno}: column {col!r} is not a number: {text!r}") from None
    if integer:
        if v != int(v):
            raise DataError(f"{path}:{lineno}: column {col!r} must be an integer")
    return v


def write_scan_csv(path, scan):
    integer = not scan.metadata.get("noiseless", False)
    counts = scan.counts.astype(np.int64) if integer else scan.counts.astype(float)
    rows = zip(scan.source_power, scan.detuning / TWO_PI, scan.dwell_time, counts)
    atomic_write(path, _render_csv("scan", SCAN_COLUMNS, rows, scan.metadata))


def read_scan_csv(path):
    meta, rows = _parse_csv(path, "scan", SCAN_COLUMNS)
    if not rows:
        raise DataError(f"{path}: scan file has no data rows")
    integer = not meta.get("noiseless", False)
    data = np.empty((len(rows), 4))
    for k, (lineno, f) in enumerate(rows):
        for c, name in enumerate(SCAN_COLUMNS):
            data[k, c] = _num(path, lineno, name, f[c], integer=(integer and name == "counts"))
        if data[k, 2] <= 0 or data[k, 3] < 0 or data[k, 0] < 0:
            raise DataError(f"{path}:{lineno}: negative power/counts or non-positive dwell")
    counts = data[:, 3].astype(np.int64) if integer else data[:, 3]
    try:
        return ScanSeries(data[:, 0], data[:, 1] * TWO_PI, data[:, 2], counts, metadata=meta)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_raster_csv(path, raster):
    x, y = raster.coordinates()
    xx, yy = np.meshgrid(x, y)
    integer = not raster.metadata.get("noiseless", False)
    vals = raster.values.astype(np.int64) if integer else raster.values.astype(float)
    meta = dict(raster.metadata)
    meta.update(
        {
            "pitch_m": raster.pitch,
            "origin_m": list(raster.origin),
            "nx": int(raster.values.shape[1]),
            "ny": int(raster.values.shape[0]),
            "dwell_s": raster.dwell_time,
            "source_power_w": raster.source_power,
        }
    )
    rows = zip(xx.ravel(), yy.ravel(), vals.ravel())
    atomic_write(path, _render_csv("raster", RASTER_COLUMNS, rows, meta))


def read_raster_csv(path):
    meta, rows = _parse_csv(path, "raster", RASTER_COLUMNS)
    for key in ("pitch_m", "nx", "ny", "dwell_s", "origin_m"):
        if key not in meta:
            raise DataError(f"{path}: raster metadata lacks {key!r}")
    nx, ny = int(meta["nx"]), int(meta["ny"])
    if len(rows) != nx * ny:
        raise DataError(f"{path}: expected {nx * ny} pixels, found {len(rows)}")
    pitch = float(meta["pitch_m"])
    ox, oy = meta["origin_m"]
    integer = not meta.get("noiseless", False)
    values = np.zeros((ny, nx), dtype=np.int64 if integer else float)
    seen = np.zeros((ny, nx), dtype=bool)
    for lineno, f in rows:
        x = _num(path, lineno, "x_m", f[0])
        y = _num(path, lineno, "y_m", f[1])
        c = _num(path, lineno, "counts", f[2], integer=integer)
        ix = int(round((x - ox) / pitch))
        iy = int(round((y - oy) / pitch))
        if not (0 <= ix < nx and 0 <= iy < ny) or c < 0:
            raise DataError(f"{path}:{lineno}: pixel outside the grid or negative counts")
        if seen[iy, ix]:
            raise DataError(f"{path}:{lineno}: duplicate pixel")
        seen[iy, ix] = True
        values[iy, ix] = c
    return RasterMap(
        pitch=pitch,
        origin=(ox, oy),
        values=values,
        dwell_time=float(meta["dwell_s"]),
        source_power=float(meta.get("source_power_w", float("nan"))),
        metadata=meta,
    )


def write_photons(path, record, fmt="binary"):
    if fmt == "binary":
        payload = PHOTON_MAGIC + np.asarray(record.timestamps, dtype="<u8").tobytes()
        atomic_write(path, payload)
    elif fmt == "csv":
        rows = ((int(t),) for t in record.timestamps)
        meta = {"duration_s": record.duration, "channel": record.channel}
        atomic_write(path, _render_csv("photons", PHOTON_CSV_COLUMNS, rows, meta))
    else:
        raise ValueError(f"unknown photon format {fmt!r}")


def read_photons(path, duration, channel):
    path = Path(path)
    if path.suffix == ".csv":
        _, rows = _parse_csv(path, "photons", PHOTON_CSV_COLUMNS)
        ts = np.array([int(_num(path, ln, "timestamp_ps", f[0], integer=True)) for ln, f in rows],
                      dtype=np.int64)
    else:
        raw = path.read_bytes()
        if raw[:8] != PHOTON_MAGIC:
            raise DataError(f"{path}: bad magic header {raw[:8]!r}")
        if (len(raw) - 8) % 8:
            raise DataError(f"{path}: truncated timestamp stream")
        ts = np.frombuffer(raw, dtype="<u8", offset=8).astype(np.int64)
    try:
        return PhotonRecord(ts, duration, channel)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def result_row(r):
    return (
        r.id, r.lambda_zpl, r.f_inf, r.f_inf_err, r.p_sat, r.p_sat_err, r.gamma_tot,
        r.gamma_tot_err, r.a_eff, r.a_eff_err, r.i_sat_inv, r.i_sat_inv_err,
        r.qe_eff_counts, r.qe_eff_counts_err, r.qe_eff_power, r.qe_eff_power_err,
        bool(r.excluded), r.exclusion_reason, bool(r.valid.get("qe_eff_counts", False)),
        bool(r.valid.get("qe_eff_power", False)),
    )


def write_results_csv(path, results):
    atomic_write(path, _render_csv("results", RESULT_COLUMNS, (result_row(r) for r in results), None))


def read_results_csv(path):
    from .pipeline import MoleculeResult

    _, rows = _parse_csv(path, "results", RESULT_COLUMNS)
    out = []
    for lineno, f in rows:
        d = dict(zip(RESULT_COLUMNS, f))
        num = {k: _num(path, lineno, k, d[k]) for k in RESULT_COLUMNS
               if k not in ("id", "excluded", "exclusion_reason", "valid_counts", "valid_power")}
        for k in ("excluded", "valid_counts", "valid_power"):
            if d[k] not in ("true", "false"):
                raise DataError(f"{path}:{lineno}: column {k!r} must be true or false")
        out.append(
            MoleculeResult(
                id=d["id"],
                lambda_zpl=num["lambda_zpl_m"],
                f_inf=num["f_inf_cps"],
                p_sat=num["p_sat_w"],
                gamma_tot=num["gamma_tot_rad_s"],
                a_eff=num["a_eff_m2"],
                i_sat_inv=num["i_sat_inv_m2_per_w"],
                qe_eff_counts=num["qe_eff_counts"],
                qe_eff_power=num["qe_eff_power"],
                f_inf_err=num["f_inf_err"],
                p_sat_err=num["p_sat_err"],
                gamma_tot_err=num["gamma_tot_err"],
                a_eff_err=num["a_eff_err"],
                i_sat_inv_err=num["i_sat_inv_err"],
                qe_eff_counts_err=num["qe_eff_counts_err"],
                qe_eff_power_err=num["qe_eff_power_err"],
                excluded=d["excluded"] == "true",
                exclusion_reason=d["exclusion_reason"],
                valid={"qe_eff_counts": d["valid_counts"] == "true",
                       "qe_eff_power": d["valid_power"] == "true"},
            )
        )
    return out


def write_table_csv(path, kind, columns, rows):
    atomic_write(path, _render_csv(kind, columns, rows, None))


def read_table_csv(path, kind, columns):
    _, rows = _parse_csv(path, kind, columns)
    return rows
