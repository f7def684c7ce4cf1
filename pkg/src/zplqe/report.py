"""Ensemble plots and summaries written by ``zpl-qe report``.

Each figure is an SVG with a CSV of the plotted points next to it, so the
numbers can be checked without image comparison. SVG output is made
deterministic by fixing matplotlib's hash salt and dropping the date stamp.
"""
from __future__ import annotations

import io as _io
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import io  # noqa: E402

_SVG_RC = {"svg.hashsalt": "zplqe", "svg.fonttype": "none"}
TWO_PI = 2 * math.pi


def _svg(fig):
    buf = _io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": "zplqe"})
    plt.close(fig)
    return buf.getvalue()


def _kept(report):
    return [r for r in report.results if not r.excluded]


def figure_saturation(report):
    """Saturation count rate against inverse saturation intensity."""
    rows = [(r.id, r.i_sat_inv, r.i_sat_inv_err, r.f_inf, r.f_inf_err) for r in _kept(report)
            if r.valid.get("qe_eff_power", False)]
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        if rows:
            _, x, xe, y, ye = map(np.array, zip(*rows))
            ax.errorbar(x * 1e9, y / 1e6, xerr=xe * 1e9, yerr=ye / 1e6, fmt="o", ms=3, lw=0.8)
        ax.set_xlabel(r"$A_\mathrm{eff}/P_\mathrm{sat}$ (m$^2$/nW)")
        ax.set_ylabel(r"$F_\mathrm{det}(\infty)$ (Mcps)")
        ax.set_title(f"corr = {report.corr_finf_isat:.3f}")
        fig.tight_layout()
        svg = _svg(fig)
    cols = ("id", "i_sat_inv_m2_per_w", "i_sat_inv_err", "f_inf_cps", "f_inf_err")
    return svg, cols, rows


def figure_qe_methods(report):
    """The two effective-QE values with the QE = 1 and theta = 0 reference curves."""
    rows = [(r.id, r.qe_eff_power, r.qe_eff_power_err, r.qe_eff_counts, r.qe_eff_counts_err)
            for r in _kept(report) if r.valid.get("qe_eff_power", False)]
    ref = report.reference_curves
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(4.5, 4.0))
        for key, style, label in (("qe1_theta", "k-", "QE = 1"), ("theta0", "k--", r"$\theta = 0$")):
            ax.plot(ref[key]["qe_eff_power"], ref[key]["qe_eff_counts"], style, lw=1, label=label)
        if rows:
            _, x, xe, y, ye = map(np.array, zip(*rows))
            ax.errorbar(x, y, xerr=xe, yerr=ye, fmt="o", ms=3, lw=0.8)
        ax.set_xlim(0, 1.2)
        ax.set_ylim(0, 1.2)
        ax.set_xlabel("QE$_\\mathrm{eff}$ from saturation power")
        ax.set_ylabel("QE$_\\mathrm{eff}$ from saturation counts")
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        svg = _svg(fig)
    cols = ("id", "qe_eff_power", "qe_eff_power_err", "qe_eff_counts", "qe_eff_counts_err")
    return svg, cols, rows


def figure_linewidth(report):
    """Natural linewidth against both effective-QE values."""
    rows = [(r.id, r.gamma_tot / TWO_PI, r.gamma_tot_err / TWO_PI, r.qe_eff_counts,
             r.qe_eff_power) for r in _kept(report)]
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        if rows:
            _, g, ge, q1, q2 = map(np.array, zip(*rows))
            ax.errorbar(g / 1e6, q1, xerr=ge / 1e6, fmt="o", ms=3, lw=0.8, label="saturation counts")
            ok = np.isfinite(q2)
            ax.errorbar(g[ok] / 1e6, q2[ok], xerr=ge[ok] / 1e6, fmt="s", ms=3, lw=0.8,
                        label="saturation power")
        ax.set_xlabel(r"$\gamma_\mathrm{tot}/2\pi$ (MHz)")
        ax.set_ylabel("QE$_\\mathrm{eff}$")
        ax.legend(frameon=False)
        fig.tight_layout()
        svg = _svg(fig)
    cols = ("id", "linewidth_hz", "linewidth_err_hz", "qe_eff_counts", "qe_eff_power")
    return svg, cols, rows


FIGURES = {
    "saturation_map": figure_saturation,
    "qe_methods": figure_qe_methods,
    "linewidth_qe": figure_linewidth,
}


def _num(x):
    x = float(x)
    return None if not math.isfinite(x) else x


def summary_dict(report, n_total):
    cal = report.calibration
    return {
        "format": "zplqe-ensemble/1",
        "n_molecules": n_total,
        "n_used": n_total - len(report.excluded_ids),
        "correlations": {
            "f_inf_vs_i_sat_inv": _num(report.corr_finf_isat),
            "gamma_tot_vs_qe_eff_counts": _num(report.corr_gamma_qe_counts),
            "gamma_tot_vs_qe_eff_power": _num(report.corr_gamma_qe_power),
        },
        "quantiles": {
            "qe_eff_counts": {str(k): _num(v) for k, v in report.quantiles_counts.items()},
            "qe_eff_power": {str(k): _num(v) for k, v in report.quantiles_power.items()},
        },
        "excluded_ids": list(report.excluded_ids),
        "calibration": None if cal is None else {
            "alpha": cal.alpha,
            "kappa": cal.kappa,
            "score": cal.score,
            "alpha_grid": cal.alpha_grid.tolist(),
            "kappa_grid": cal.kappa_grid.tolist(),
            "scores": cal.scores.tolist(),
        },
        "flags": list(report.flags),
    }


def summary_text(summary):
    def fmt(v):
        return "nan" if v is None else f"{v:.4f}"

    c = summary["correlations"]
    lines = [
        f"molecules: {summary['n_molecules']} ({summary['n_used']} used, "
        f"{len(summary['excluded_ids'])} excluded)",
        f"corr(f_inf, A_eff/P_sat): {fmt(c['f_inf_vs_i_sat_inv'])}",
        f"corr(gamma_tot, qe_eff_counts): {fmt(c['gamma_tot_vs_qe_eff_counts'])}",
        f"corr(gamma_tot, qe_eff_power): {fmt(c['gamma_tot_vs_qe_eff_power'])}",
    ]
    for name in ("qe_eff_counts", "qe_eff_power"):
        q = summary["quantiles"][name]
        lines.append(f"{name} quantiles: " + ", ".join(f"{k}={fmt(v)}" for k, v in q.items()))
    cal = summary["calibration"]
    if cal is None:
        lines.append("calibration: not available")
    else:
        lines.append(f"calibration: alpha={cal['alpha']:.4g} kappa={cal['kappa']:.4g} "
                     f"score={cal['score']:.4g}")
    if summary["excluded_ids"]:
        lines.append("excluded: " + ", ".join(summary["excluded_ids"]))
    for flag in summary["flags"]:
        lines.append(f"flag: {flag}")
    return "\n".join(lines) + "\n"


def write_report(report, out_dir, n_total):
    """Write the three figures, their point tables, a JSON and a text summary."""
    written = []
    for name, build in FIGURES.items():
        svg, cols, rows = build(report)
        io.atomic_write(out_dir / f"{name}.svg", svg)
        io.write_table_csv(out_dir / f"{name}.csv", "points", cols, rows)
        written += [out_dir / f"{name}.svg", out_dir / f"{name}.csv"]
    ref = report.reference_curves
    ref_rows = [(key, x, y) for key in ("qe1_theta", "theta0")
                for x, y in zip(ref[key]["qe_eff_power"], ref[key]["qe_eff_counts"])]
    io.write_table_csv(out_dir / "reference_curves.csv", "points", ("curve", "qe_eff_power",
                       "qe_eff_counts"), ref_rows)
    summary = summary_dict(report, n_total)
    io.write_json(out_dir / "ensemble.json", summary)
    io.atomic_write(out_dir / "summary.txt", summary_text(summary))
    written += [out_dir / "reference_curves.csv", out_dir / "ensemble.json", out_dir / "summary.txt"]
    return written
