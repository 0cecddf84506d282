"""Command-line orchestration.

Subcommands: ``simulate``, ``homogeneous``, ``verify-characteristics``,
``verify-supersolution``, ``report``.  Outputs are data only (CSV/JSON
plus snapshot files); plotting is left downstream.  Exit codes: 0 ok,
2 configuration error, 3 numerical failure, 4 verification violations.

All schemes are deterministic and vectorized in-process: ``--threads``
partitions verification sweeps into fixed-size chunks whose merge order
is independent of the pool size, so results never depend on it.
``--seed`` is accepted and recorded but unused by the current schemes.
"""

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .characteristics import CharParams, auto_tune_R, make_char_samples, verify_char_bounds
from .config import (Manifest, build_grid, build_initial, build_kernel,
                     build_run_config, config_hash, parse_config, timed)
from .diagnostics import decay_envelope_check, gelation_detector
from .errors import ConfigurationError, NumericalError, SedcoagError, TuningError
from .grid import GridSpec, save_snapshot
from .kernels import sum_kernel, truncate_kernel
from .solver import (RunConfig, run_approximate_transport, run_homogeneous,
                     run_mild_solver, run_operator_split)
from .supersolution import calibrate

_CHUNK = 512  # fixed sweep chunk size: results never depend on pool width


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        _emit_error("ConfigurationError", exc)
        return 2
    except TuningError as exc:
        _emit_error("TuningError", exc)
        return 4 if getattr(args, "_verify", False) else 3
    except NumericalError as exc:
        _emit_error(type(exc).__name__, exc)
        return 3
    except SedcoagError as exc:
        _emit_error(type(exc).__name__, exc)
        return 3


def _emit_error(kind, exc):
    json.dump({"error": kind, "message": str(exc)}, sys.stderr)
    sys.stderr.write("\n")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="sedcoag",
        description="coagulation + sedimentation simulator and verifier")
    sub = parser.add_subparsers(required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="sweep worker pool size (results independent)")
        p.add_argument("--seed", type=int, default=0,
                       help="reserved; current schemes are deterministic")

    p = sub.add_parser("simulate", help="run the configured solver mode")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("homogeneous", help="single-column coagulation runs")
    common(p)
    p.add_argument("--sweep-N", default=None,
                   help="comma list of truncation volumes for a gelation sweep")
    p.add_argument("--threshold", type=float, default=0.01,
                   help="relative mass-loss threshold for onset detection")
    p.set_defaults(func=cmd_homogeneous)

    p = sub.add_parser("verify-characteristics",
                       help="tune the drift cutoff and check the flow bounds")
    common(p)
    p.add_argument("--samples", type=int, default=500, help="sweep budget")
    p.add_argument("--horizon", type=float, default=1.0, help="largest t")
    p.set_defaults(func=cmd_verify_characteristics, _verify=True)

    p = sub.add_parser("verify-supersolution",
                       help="fit constants and sweep the evolution inequality")
    common(p)
    p.set_defaults(func=cmd_verify_supersolution, _verify=True)

    p = sub.add_parser("report", help="aggregate diagnostics CSVs")
    p.add_argument("runs", nargs="+", help="run directories to aggregate")
    p.add_argument("--out", default="aggregated.csv", help="output CSV path")
    p.set_defaults(func=cmd_report)
    return parser


def _prepare(args):
    resolved, raw = parse_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    return resolved, raw, config_hash(resolved)


def _write_diagnostics(path, solution):
    diffs = solution.iterate_diffs
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "mass", "number", "overflow",
                         "boundary_flux", "fitted_C", "sup_diff"])
        series = solution.series
        ini = solution.config.initial
        for i, t in enumerate(series.times):
            fitted = ""
            if i == len(series.times) - 1:
                fitted = repr(decay_envelope_check(
                    solution.final, ini.c0, ini)["fitted_C"])
            sup = repr(diffs[i].sup_diff) if i < len(diffs) else ""
            writer.writerow([repr(t), repr(series.mass[i]),
                             repr(series.number[i]), repr(series.overflow[i]),
                             repr(series.boundary[i]), fitted, sup])


def _write_snapshots(out_dir, solution, digest):
    n_out = min(solution.config.n_outputs, len(solution.fields))
    idx = sorted({int(round(i)) for i in
                  np.linspace(0, len(solution.fields) - 1, n_out)})
    paths = []
    for rank, i in enumerate(idx):
        path = os.path.join(out_dir, f"snapshot_{rank:04d}.snap")
        save_snapshot(solution.fields[i], path, config_hash=digest)
        paths.append(path)
    return paths


def cmd_simulate(args):
    resolved, raw, digest = _prepare(args)
    cfg = build_run_config(resolved, raw)
    t0 = timed()
    runner = {
        "mild_picard": run_mild_solver,
        "operator_split": run_operator_split,
        "homogeneous": run_homogeneous,
        "approximate_transport": run_approximate_transport,
    }[cfg.mode]
    solution = runner(cfg)
    wall = timed() - t0
    _write_snapshots(args.out, solution, digest)
    _write_diagnostics(os.path.join(args.out, "diagnostics.csv"), solution)
    manifest = Manifest(
        config=resolved, config_hash=digest, wall_clock_s=wall,
        step_count=len(solution.times) - 1,
        iterate_diffs=[{"n": d.n, "sup_diff": d.sup_diff, "ratio": d.ratio}
                       for d in solution.iterate_diffs],
        extra={"info": {k: v for k, v in solution.info.items()},
               "threads": args.threads, "seed": args.seed,
               "ledger_defect_max": max(
                   (abs(d) for d in solution.series.ledger_defects()),
                   default=0.0)})
    manifest.write(os.path.join(args.out, "manifest.json"))
    print(args.out)
    return 0


def cmd_homogeneous(args):
    resolved, raw, digest = _prepare(args)
    if args.sweep_N is None:
        resolved["solver.mode"] = "homogeneous"
        cfg = build_run_config(resolved, raw)
        t0 = timed()
        solution = run_homogeneous(cfg)
        wall = timed() - t0
        _write_diagnostics(os.path.join(args.out, "diagnostics.csv"), solution)
        onset = gelation_detector(solution.series, args.threshold,
                                  credit=("boundary",))
        Manifest(config=resolved, config_hash=digest, wall_clock_s=wall,
                 step_count=len(solution.times) - 1,
                 extra={"onset": onset, "threshold": args.threshold,
                        "threads": args.threads, "seed": args.seed}).write(
            os.path.join(args.out, "manifest.json"))
        print(args.out)
        return 0
    cutoffs = [float(s) for s in args.sweep_N.split(",")]
    onsets = sweep_truncations(resolved, cutoffs, threshold=args.threshold)
    path = os.path.join(args.out, "gelation_sweep.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "onset_time"])
        for cutoff, onset in onsets:
            writer.writerow([repr(cutoff), "" if onset is None else repr(onset)])
    Manifest(config=resolved, config_hash=digest,
             extra={"sweep_N": cutoffs, "threshold": args.threshold,
                    "onsets": [[c, o] for c, o in onsets],
                    "threads": args.threads, "seed": args.seed}).write(
        os.path.join(args.out, "manifest.json"))
    print(path)
    return 0


def sweep_truncations(resolved, cutoffs, threshold=0.01, gamma=None,
                      horizon=None, nv=None):
    """Gelation onset per truncation volume N (grid top tied to N).

    Mass driven past the largest pivot is counted as gel: the overflow
    ledger is deliberately not credited in the onset detector.
    """
    gamma = resolved["kernel.gamma"] if gamma is None else gamma
    onsets = []
    for cutoff in cutoffs:
        g = GridSpec(x_min=0.0, x_max=1.0, nx=1,
                     v_min=1e-3, v_max=cutoff,
                     nv=nv or resolved["grid.nv"])
        kernel = truncate_kernel(sum_kernel(gamma), cutoff)
        cfg = RunConfig(grid=g, kernel=kernel,
                        initial=build_initial(resolved),
                        T=horizon or max(2.0, resolved["solver.T"]),
                        dt=resolved["solver.dt"], mode="homogeneous")
        solution = run_homogeneous(cfg, stop_loss_fraction=1.5 * threshold)
        onset = gelation_detector(solution.series, threshold,
                                  credit=("boundary",))
        onsets.append((cutoff, onset))
    return onsets


def _merged_bound_reports(samples, delta, params, threads):
    chunks = [samples[i:i + _CHUNK] for i in range(0, len(samples), _CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(
                lambda c: verify_char_bounds(c, delta, params), chunks))
    else:
        reports = [verify_char_bounds(c, delta, params) for c in chunks]
    merged = reports[0]
    for rep in reports[1:]:
        merged.n_samples += rep.n_samples
        for name in merged.checked:
            merged.checked[name] += rep.checked[name]
            merged.violations[name].extend(rep.violations[name])
            if rep.worst_margin[name] < merged.worst_margin[name]:
                merged.worst_margin[name] = rep.worst_margin[name]
                merged.witness[name] = rep.witness[name]
    return merged


def cmd_verify_characteristics(args):
    resolved, raw, digest = _prepare(args)
    kernel = build_kernel(resolved, raw)
    base = CharParams(L=max(resolved["solver.char_L"], 0.0),
                      R=1.0, alpha=resolved["initial.alpha"],
                      gamma=kernel.gamma, m=resolved["initial.m"])
    delta = resolved["supersolution.delta"]
    t0 = timed()
    R, params, tune_report = auto_tune_R(
        delta, base, budget=args.samples,
        v_range=(resolved["grid.v_min"], 1e4), t_max=args.horizon)
    confirm_samples = make_char_samples(
        2 * args.samples, v_range=(resolved["grid.v_min"], 1e4),
        t_max=args.horizon)
    confirm = _merged_bound_reports(confirm_samples, delta, params,
                                    args.threads)
    wall = timed() - t0
    payload = {
        "tuned_R": R,
        "delta": delta,
        "L": params.L,
        "tuning": tune_report.summary(),
        "confirmation": confirm.summary(),
        "wall_clock_s": round(wall, 3),
        "config_hash": digest,
    }
    with open(os.path.join(args.out, "characteristics_report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1, default=str)
        fh.write("\n")
    print(os.path.join(args.out, "characteristics_report.json"))
    return 0 if confirm.passed else 4


def cmd_verify_supersolution(args):
    resolved, raw, digest = _prepare(args)
    kernel = build_kernel(resolved, raw)
    grid = build_grid(resolved)
    initial = build_initial(resolved)
    t0 = timed()
    sp, report = calibrate(
        kernel, initial, grid,
        delta=resolved["supersolution.delta"],
        char_budget=resolved["supersolution.char_budget"],
        residual_target=resolved["supersolution.residual_samples"])
    wall = timed() - t0
    payload = report.summary()
    payload.update({"wall_clock_s": round(wall, 3), "config_hash": digest,
                    "horizon": sp.horizon})
    with open(os.path.join(args.out, "supersolution_report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1, default=str)
        fh.write("\n")
    print(os.path.join(args.out, "supersolution_report.json"))
    ok = report.residual_min >= -1e-6 * initial.c0
    return 0 if ok else 4


def cmd_report(args):
    rows = []
    for run_dir in args.runs:
        path = os.path.join(run_dir, "diagnostics.csv")
        if not os.path.exists(path):
            raise ConfigurationError(f"no diagnostics.csv under {run_dir}")
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                row["run"] = run_dir
                rows.append(row)
    fieldnames = ["run", "time", "mass", "number", "overflow",
                  "boundary_flux", "fitted_C", "sup_diff"]
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    print(args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
