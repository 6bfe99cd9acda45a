"""Command-line entry points.

Exit codes
----------
0  success
1  unexpected failure
2  bad config file, malformed record table or invalid input
3  contact (d <= 0 or snap-in) during a simulated run
4  a mask leaves too few points, or too few samples for an error budget
5  the exact sphere-plane series did not converge
6  a fit failed to converge or gave an unphysical result
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    FitError,
    Mask,
    MaskError,
    campaign_statistics,
    estimate_relative_error,
    expected_pfa_residuals,
    fit_linear_inverse,
    fit_log_voltage,
    fit_power_law,
    resolve_mask,
    vdc_uncertainty_by_step,
)
from .config import AnalysisOptions, ConfigError, config_hash, default_seed, load_config
from .electrostatics import SeriesConvergenceError
from .formats import (
    RecordFormatError,
    atomic_write_text,
    group_runs,
    read_records,
    write_records,
    write_report,
)
from .rig import ContactError, RigConfig, execute_campaign, execute_hold

log = logging.getLogger("sphereplate")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_CONTACT, EXIT_MASK, EXIT_SERIES, EXIT_FIT = range(7)


def _meta_seed(meta: dict):
    raw = meta.get("seed")
    try:
        return int(raw)
    except (TypeError, ValueError):
        return raw


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------ simulate


def cmd_simulate(args) -> int:
    if args.config:
        rig, analysis = load_config(args.config, seed=args.seed)
    else:
        seed = args.seed if args.seed is not None else default_seed()
        rig, analysis = RigConfig(seed=seed), AnalysisOptions()
    meta = {"seed": rig.seed, "config_sha256": config_hash(rig, analysis)}
    if args.hold:
        run = execute_hold(rig, args.hold_separation_nm * 1e-9, args.hold_minutes, args.hold_interval_s)
        records = run.records
        meta.update(kind="hold", separation_nm=args.hold_separation_nm, total_minutes=_minutes(records))
    else:
        if args.runs < 1:
            raise ConfigError("--runs must be >= 1")
        campaign = execute_campaign(rig, args.runs)
        records = campaign.records
        meta.update(kind="approach", runs=args.runs, total_minutes=format(args.runs * rig.run_minutes, ".6f"))
    write_records(args.output, records, meta)
    log.info("wrote %d records to %s", len(records), args.output)
    return EXIT_OK


def _minutes(records) -> str:
    return format(records[-1].t_min - records[0].t_min, ".6f") if records else "0"


# ------------------------------------------------------------------- analyze


def _fit_dict(fit) -> dict:
    return {
        "kappa_m^p_per_V": fit.kappa,
        "kappa_err_m^p_per_V": fit.kappa_err,
        "d0_nm": fit.d0 * 1e9,
        "d0_err_nm": fit.d0_err * 1e9,
        "p": fit.p,
        "p_err": fit.p_err if fit.p_free else None,
        "p_free": fit.p_free,
        "chi2": fit.chi2,
        "dof": fit.dof,
        "reduced_chi2": fit.reduced_chi2,
        "n_used": fit.n_used,
        "n_excluded": fit.n_excluded,
        "mask": fit.mask,
    }


def _parse_p_modes(modes) -> list[tuple[str, float | None]]:
    out = []
    for m in modes:
        m = m.strip()
        if m == "free":
            out.append((m, None))
        else:
            try:
                out.append((m, float(m)))
            except ValueError:
                raise ConfigError(f"bad p-mode {m!r}: use 'free' or a number") from None
    return out


def analyze_runs(runs, opts: AnalysisOptions, log_base: float = 10.0) -> dict:
    """Per-run fits, campaign statistics and the V_DC(d) fit as a report dict."""
    mask = Mask.parse(opts.mask)
    modes = _parse_p_modes(opts.p_modes)
    sigma = opts.sigma_rel
    fig2, lin_fits, residual_rows = [], [], []
    for run in runs:
        x, a = run.d_pz, run.alpha
        try:
            keep = resolve_mask(x, a, mask, sigma)
            lin = fit_linear_inverse(x, a, sigma, keep=keep, mask=mask.describe())
        except MaskError as exc:
            raise MaskError(f"run {run.run_id}: {exc}") from exc
        lin_fits.append(lin)
        fits = {}
        for name, p in modes:
            fits[name] = _fit_dict(fit_power_law(x, a, sigma, p=p, keep=keep, mask=mask.describe()))
        fig2.append({"run_id": run.run_id, "n_points": len(run), "fits": fits})
        d_used = lin.d0 - x[keep]
        residual_rows += [[run.run_id, d * 1e9, r] for d, r in zip(d_used, lin.residuals)]

    report = {
        "fig2": {"runs": fig2},
        "fig4": {
            "linear_inverse_fits": [dict(run_id=r.run_id, **_fit_dict(f)) for r, f in zip(runs, lin_fits)],
            "residuals": {"columns": ["run_id", "d_nm", "residual_rel"], "rows": residual_rows},
        },
    }

    if len(runs) >= 2:
        times = [float(r.t_min.mean()) for r in runs]
        cs = campaign_statistics(lin_fits, times, opts.outlier_sigma)
        report["fig4"]["campaign"] = {
            "mean_reduced_chi2": cs.mean_reduced_chi2,
            "std_reduced_chi2": cs.std_reduced_chi2,
            "n_runs_kept": cs.n_runs,
            "outlier_run_ids": [runs[i].run_id for i in cs.outliers],
            "outlier_rule": f"reduced chi2 > mean + {cs.outlier_sigma:g} std, iterated",
            "d0_rate_nm_per_min": cs.d0_rate * 1e9,
            "d0_total_drift_nm": cs.d0_total_drift * 1e9,
            "kappa_rate_per_min": cs.kappa_rate,
        }
        report["fig4"]["trajectory"] = {
            "columns": ["run_id", "t_min", "d0_nm", "kappa_m_per_V"],
            "rows": [[r.run_id, t, f.d0 * 1e9, f.kappa] for r, t, f in zip(runs, times, lin_fits)],
        }
    report["fig5"] = _vdc_section(runs, lin_fits, opts, log_base)
    return report


def _vdc_section(runs, lin_fits, opts: AnalysisOptions, log_base: float) -> dict:
    if len(runs) < 2:
        return {"skipped": "needs at least 2 runs to estimate V_DC uncertainties"}
    lengths = {len(r) for r in runs}
    if len(lengths) != 1:
        return {"skipped": "runs have different numbers of points"}
    sig = vdc_uncertainty_by_step(np.array([r.v_dc for r in runs]))
    if not np.all(sig > 0):
        return {"skipped": "zero V_DC spread across runs at some step"}
    fits = []
    for run, lin in zip(runs, lin_fits):
        fits.append(fit_log_voltage(lin.d0 - run.d_pz, run.v_dc, sig, log_base))
    ids = [r.run_id for r in runs]
    chosen = opts.vdc_run if opts.vdc_run is not None else ids[len(ids) // 2]
    if chosen not in ids:
        raise ConfigError(f"vdc_run {chosen} not present in the records")
    i = ids.index(chosen)
    f, run, lin = fits[i], runs[i], lin_fits[i]
    a_all = np.array([g.a for g in fits])
    b_all = np.array([g.b for g in fits])
    return {
        "log_base": log_base,
        "run_id": chosen,
        "a_mV": f.a * 1e3,
        "a_err_mV": f.a_err * 1e3,
        "b_mV": f.b * 1e3,
        "b_err_mV": f.b_err * 1e3,
        "reduced_chi2": f.reduced_chi2,
        "dof": f.dof,
        "table": {
            "columns": ["d_nm", "v_dc_mV", "sigma_mV"],
            "rows": [[d * 1e9, v * 1e3, s * 1e3] for d, v, s in zip(lin.d0 - run.d_pz, run.v_dc, sig)],
        },
        "all_runs": {
            "a_mean_mV": float(a_all.mean()) * 1e3,
            "a_std_mV": float(a_all.std(ddof=1)) * 1e3,
            "b_mean_mV": float(b_all.mean()) * 1e3,
            "b_std_mV": float(b_all.std(ddof=1)) * 1e3,
        },
    }


def cmd_analyze(args) -> int:
    opts = AnalysisOptions()
    log_base = 10.0
    if args.config:
        rig, opts = load_config(args.config)
        log_base = rig.contact_potential.log_base
    if args.mask:
        opts.mask = args.mask
    if args.p_mode:
        opts.p_modes = [m for m in args.p_mode.split(",") if m.strip()]
    if args.sigma_rel is not None:
        opts.sigma_rel = args.sigma_rel
    if args.vdc_run is not None:
        opts.vdc_run = args.vdc_run
    if args.log_base is not None:
        log_base = args.log_base
    records, meta = read_records(args.records)
    runs = group_runs(records)
    if not runs:
        raise RecordFormatError(0, "no records")
    try:
        Mask.parse(opts.mask)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    report = analyze_runs(runs, opts, log_base)
    report["meta"] = {
        "schema": "sphereplate report v1",
        "version": __version__,
        "records_sha256": _sha256_file(args.records),
        "seed": _meta_seed(meta),
        "config_sha256": meta.get("config_sha256"),
        "n_runs": len(runs),
        "mask": opts.mask,
        "p_modes": list(opts.p_modes),
        "sigma_rel": opts.sigma_rel,
        "units": "field names carry units as suffixes; *_rel and chi2 fields are dimensionless",
    }
    write_report(args.report, report)
    return EXIT_OK


# ---------------------------------------------------------------- pfa oracle


def pfa_oracle_table(radius, d_min, d_max, n_points, model="exact", tol=1e-12) -> tuple[str, float]:
    if not (0 < d_min < d_max):
        raise ConfigError("need 0 < d_min < d_max")
    if n_points < 3:
        raise ConfigError("need at least 3 points")
    d = np.geomspace(d_max, d_min, n_points)
    res = expected_pfa_residuals(radius, d, tol, model)
    lines = [
        "# sphereplate pfa residuals v1",
        f"# radius_um: {radius * 1e6:.12g}",
        f"# model: {model}",
        f"# max_abs_residual_rel: {res.max_abs:.17g}",
        "d_nm,residual_rel",
    ]
    lines += [f"{di * 1e9:.17g},{ri:.17g}" for di, ri in zip(res.separation, res.residual)]
    return "\n".join(lines) + "\n", res.max_abs


def cmd_pfa_oracle(args) -> int:
    text, max_abs = pfa_oracle_table(
        args.radius_um * 1e-6, args.d_min_nm * 1e-9, args.d_max_nm * 1e-9, args.n_points, args.model, args.tol
    )
    atomic_write_text(args.output, text)
    log.info("max |residual| = %.3f %%", 100 * max_abs)
    return EXIT_OK


# -------------------------------------------------------------- error budget


class InsufficientSamples(ValueError):
    pass


def cmd_error_budget(args) -> int:
    records, meta = read_records(args.records)
    if not records:
        raise InsufficientSamples("no records")
    positions = {(r.run_id, r.d_pz) for r in records}
    if len(positions) != 1:
        raise RecordFormatError(0, "error budget needs a single run at a single stage position")
    alpha = np.array([r.alpha for r in records])
    if alpha.size < 100:
        raise InsufficientSamples(f"need at least 100 samples, have {alpha.size}")
    est = estimate_relative_error(alpha)
    edges = est.edges
    report = {
        "meta": {
            "schema": "sphereplate report v1",
            "version": __version__,
            "records_sha256": _sha256_file(args.records),
            "seed": _meta_seed(meta),
            "config_sha256": meta.get("config_sha256"),
            "units": "field names carry units as suffixes; *_rel fields are dimensionless fractions",
        },
        "fig3": {
            "n_samples": int(alpha.size),
            "d_pz_nm": records[0].d_pz * 1e9,
            "duration_min": records[-1].t_min - records[0].t_min,
            "smoothing": est.smoothing,
            "window_points": est.window,
            "sigma_rel": est.sigma_rel,
            "sample_std_rel": est.sample_std,
            "gauss_fit": {
                "amplitude_counts": est.gauss_amplitude,
                "mean_rel": est.gauss_mean,
                "sigma_rel": est.sigma_rel,
            },
            "normality_pvalue": est.normality_pvalue,
            "histogram": {
                "columns": ["bin_lo_rel", "bin_hi_rel", "count"],
                "rows": [[lo, hi, int(c)] for lo, hi, c in zip(edges[:-1], edges[1:], est.counts)],
            },
        },
    }
    write_report(args.report, report)
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sphereplate", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="run the virtual rig and write a record table")
    sp.add_argument("config", nargs="?", help="JSON config (defaults used if omitted)")
    sp.add_argument("output")
    sp.add_argument("--runs", type=int, default=184)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--hold", action="store_true", help="park at one position instead of approaching")
    sp.add_argument("--hold-separation-nm", type=float, default=150.0)
    sp.add_argument("--hold-minutes", type=float, default=120.0)
    sp.add_argument("--hold-interval-s", type=float, default=5.0)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("analyze", help="fit records and write a report")
    sp.add_argument("records")
    sp.add_argument("report")
    sp.add_argument("--config", help="JSON config supplying analysis options and the log base")
    sp.add_argument("--mask", help="all | farthest:K | below:120nm | indices:i,j,...")
    sp.add_argument("--p-mode", help="comma list of 'free' and fixed exponents, e.g. free,1,0.7")
    sp.add_argument("--sigma-rel", type=float)
    sp.add_argument("--vdc-run", type=int)
    sp.add_argument("--log-base", type=float)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("pfa-oracle", help="expected residuals of p = 1 fits to exact sphere-plane data")
    sp.add_argument("output")
    sp.add_argument("--radius-um", type=float, default=100.0)
    sp.add_argument("--d-min-nm", type=float, default=100.0)
    sp.add_argument("--d-max-nm", type=float, default=2000.0)
    sp.add_argument("--n-points", type=int, default=50)
    sp.add_argument("--model", choices=("exact", "pfa"), default="exact")
    sp.add_argument("--tol", type=float, default=1e-12)
    sp.set_defaults(func=cmd_pfa_oracle)

    sp = sub.add_parser("error-budget", help="relative error of alpha from a fixed-position series")
    sp.add_argument("records")
    sp.add_argument("report")
    sp.set_defaults(func=cmd_error_budget)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, RecordFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ContactError as exc:
        print(f"contact error in run {exc.run_id}: {exc}", file=sys.stderr)
        return EXIT_CONTACT
    except (MaskError, InsufficientSamples) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MASK
    except SeriesConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SERIES
    except FitError as exc:
        print(f"fit error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
