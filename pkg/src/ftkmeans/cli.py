"""Command-line front end: dataset generation, clustering, fault campaigns,
tuning, benchmarking, and self-verification.

Exit codes: 0 success, 2 usage error, 3 a detected-uncorrectable fault
occurred, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys

import numpy as np

from . import __version__
from .abft import Threshold, checked_gemm
from .errors import FormatError
from .faults import FaultEntry, FaultSchedule, ScheduledFaultHook
from .gemm import fused_assign, gemm_tiled
from .kmeans import KMeansConfig, lloyd
from .matrix import mat_load, mat_random, mat_store, precision_of
from .tiles import default_config, parse_tile
from .tuner import TuneTable, bench_shapes, default_grid, enumerate_configs, select, shortlist, ParamSpace

REPORT_SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_UNCORRECTABLE = 3
EXIT_VERIFY = 4


def _write_report(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "metric", "value"])
        w.writerow(["meta", "schema_version", REPORT_SCHEMA_VERSION])
        for phase, metric, value in rows:
            w.writerow([phase, metric, value])


def _load_input(path, precision):
    if str(path).endswith(".csv"):
        return mat_load(path, format="csv", precision=precision)
    return mat_load(path, format="ftkm-binary")


def cmd_generate(args):
    x = mat_random(args.rows, args.cols, precision=args.precision, seed=args.seed,
                   distribution=args.dist)
    mat_store(x, args.out, format="ftkm-binary")
    print(f"wrote {args.rows}x{args.cols} {precision_of(x)} matrix to {args.out}")
    return EXIT_OK


def _cluster_rows(args, x, result, gflops):
    digest = hashlib.sha256(result.assignments.tobytes()).hexdigest()
    rows = [
        ("meta", "command", "cluster"),
        ("meta", "version", __version__),
        ("meta", "precision", precision_of(x)),
        ("meta", "rows", x.shape[0]),
        ("meta", "cols", x.shape[1]),
        ("config", "k", args.k),
        ("config", "ft", args.ft),
        ("config", "inject", args.inject or "none"),
        ("config", "seed", args.seed),
        ("config", "max_iters", args.max_iters),
        ("config", "tol", args.tol),
        ("config", "tile", args.tile),
        ("timing", "init_ns", result.timings["init_ns"]),
        ("timing", "assign_ns", result.timings["assign_ns"]),
        ("timing", "update_ns", result.timings["update_ns"]),
        ("timing", "total_ns", result.timings["total_ns"]),
        ("perf", "assign_gflops", gflops),
        ("result", "iters", result.iters),
        ("result", "converged", result.converged),
        ("result", "inertia", repr(result.inertia)),
        ("result", "assignments_sha256", digest),
        ("ft", "detections", result.report.detections),
        ("ft", "corrections", result.report.corrections),
        ("ft", "uncorrectable", result.report.uncorrectable),
        ("ft", "dmr_mismatches", result.report.dmr_mismatches),
        ("ft", "false_alarms", result.report.false_alarms),
    ]
    return rows


def cmd_cluster(args):
    x = _load_input(args.input, args.precision)
    if args.inject and args.inject != "none" and args.ft == "off":
        print("warning: faults injected without protection", file=sys.stderr)

    tile = "auto"
    tune_table = TuneTable.load(args.tune_table) if args.tune_table else None
    if args.tile != "auto":
        tile = parse_tile(args.tile, x.dtype)
    elif tune_table is None:
        print("warning: --tile auto with no tune table, using default config", file=sys.stderr)

    config = KMeansConfig(
        k=args.k,
        max_iters=args.max_iters,
        tol=args.tol,
        seed=args.seed,
        ft_mode=args.ft,
        init=args.init,
        tile=tile,
        threshold=Threshold(args.delta) if args.delta else None,
        threads=args.threads,
        tune_table=tune_table,
    )
    result = lloyd(x, config, fault_spec=args.inject)
    m, n = x.shape
    flops = 2.0 * m * n * args.k * (result.iters + 1)
    gflops = flops / max(result.timings["assign_ns"], 1) if result.timings["assign_ns"] else 0.0
    rows = _cluster_rows(args, x, result, gflops)

    if args.compare:
        base_cfg = KMeansConfig(
            k=args.k, max_iters=args.max_iters, tol=args.tol, seed=args.seed,
            ft_mode="off", init=args.init, tile=tile, threads=args.threads,
            tune_table=tune_table,
        )
        base = lloyd(x, base_cfg)
        t_ft = result.timings["total_ns"]
        t_base = base.timings["total_ns"]
        overhead = (t_ft - t_base) / t_base if t_base else float("inf")
        rows.append(("summary", "baseline_total_ns", t_base))
        rows.append(("summary", "overhead_pct", 100.0 * overhead))
        rows.append(
            ("summary", "assignments_match_baseline",
             bool(np.array_equal(base.assignments, result.assignments)))
        )

    exit_code = EXIT_UNCORRECTABLE if result.report.uncorrectable else EXIT_OK
    rows.append(("summary", "exit_code", exit_code))
    if args.report:
        _write_report(args.report, rows)
    if args.labels_out:
        np.savetxt(args.labels_out, result.assignments, fmt="%d")
    if args.events_out:
        result.report.to_csv(args.events_out)
    print(
        f"k={args.k} iters={result.iters} converged={result.converged} "
        f"inertia={result.inertia:.6g} detections={result.report.detections} "
        f"corrections={result.report.corrections}"
    )
    return exit_code


def _parse_shapes(text):
    if text == "grid:default":
        return default_grid()
    shapes = []
    with open(text) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            m, n, k = (int(v) for v in line.split(","))
            shapes.append((m, n, k))
    if not shapes:
        raise ValueError(f"no shapes found in {text}")
    return shapes


def cmd_tune(args):
    shapes = _parse_shapes(args.shapes)
    if args.space == "full":
        space = enumerate_configs(args.precision)
    else:
        space = ParamSpace(args.precision, shortlist(args.precision))

    def progress(shape, cfg, gflops):
        print(f"  shape {shape} cfg {cfg}: {gflops:.2f} GFLOPS", file=sys.stderr)

    table = select(
        shapes, space, ft_mode=args.ft, reps=args.reps, probe_m=args.probe_m,
        cache_budget=args.budget, threads=args.threads,
        progress=progress if args.verbose else None,
    )
    table.save(args.out)
    print(f"tuned {len(shapes)} shapes over {len(space.configs)} candidates -> {args.out}")
    distinct = {e.config.as_tuple() for e in table.entries.values()}
    print(f"distinct selected configs: {len(distinct)}")
    return EXIT_OK


def cmd_bench(args):
    shapes = _parse_shapes(args.grid)
    tune_table = TuneTable.load(args.tune_table) if args.tune_table else None

    def progress(row):
        print(
            f"M={row['M']} N={row['N']} K={row['K']}: off {row['gflops_off']:.2f} "
            f"ft {row['gflops_ft']:.2f} GFLOPS overhead {row['overhead_pct']:.1f}%",
            file=sys.stderr,
        )

    rows = bench_shapes(
        shapes, precision=args.precision, reps=args.reps, tune_table=tune_table,
        threads=args.threads, progress=progress,
    )
    if args.report:
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["M", "N", "K", "precision", "config",
                        "gflops_off", "gflops_ft", "overhead_pct"])
            for r in rows:
                w.writerow([r["M"], r["N"], r["K"], r["precision"], r["config"],
                            repr(r["gflops_off"]), repr(r["gflops_ft"]),
                            repr(r["overhead_pct"])])
    mean_ov = float(np.mean([r["overhead_pct"] for r in rows]))
    max_ov = float(np.max([r["overhead_pct"] for r in rows]))
    print(f"benched {len(rows)} shapes: mean overhead {mean_ov:.1f}%, max {max_ov:.1f}%")
    return EXIT_OK


def _verify_assignment_oracle(n_cases, seed, threads):
    rng = np.random.default_rng(seed)
    bad = 0
    for c in range(n_cases):
        m = int(rng.integers(16, 600))
        n = int(rng.integers(1, 96))
        k = int(rng.integers(1, 128))
        dt = np.float32 if c % 2 == 0 else np.float64
        x = np.ascontiguousarray(rng.standard_normal((m, n)), dtype=dt)
        y = np.ascontiguousarray(rng.standard_normal((k, n)), dtype=dt)
        res = fused_assign(x, y, threads=threads)
        d = (y.astype(np.float64) ** 2).sum(1)[None, :] - 2.0 * (
            x.astype(np.float64) @ y.astype(np.float64).T
        )
        oracle = np.argmin(d, axis=1)
        mism = np.flatnonzero(oracle != res.assignments)
        for i in mism:
            row = np.sort(d[i])
            gap = row[1] - row[0]
            scale = max(abs(row[0]), 1e-30)
            if gap / scale >= 1e-5:
                bad += 1
    return bad == 0, f"{n_cases} instances, non-near-tie mismatches: {bad}"


def _verify_checksums(n_cases, seed, threads):
    rng = np.random.default_rng(seed)
    failures = 0
    for c in range(n_cases):
        m = int(rng.integers(8, 200))
        n = int(rng.integers(1, 64))
        k = int(rng.integers(4, 64))
        dt = np.float32 if c % 2 == 0 else np.float64
        a = np.ascontiguousarray(rng.random((m, n)), dtype=dt)
        b = np.ascontiguousarray(rng.random((k, n)), dtype=dt)
        out, rep = checked_gemm(a, b, threads=threads)
        ref = gemm_tiled(a, b, threads=threads)
        if rep.detections != 0 or out.tobytes() != ref.tobytes():
            failures += 1
    return failures == 0, f"{n_cases} fault-free runs, failures: {failures}"


def _verify_injection(n_cases, seed, threads):
    rng = np.random.default_rng(seed)
    failures = 0
    for c in range(n_cases):
        m, n, k = 96, 32, 48
        a = np.ascontiguousarray(rng.random((m, n)), dtype=np.float32)
        b = np.ascontiguousarray(rng.random((k, n)), dtype=np.float32)
        ref = gemm_tiled(a, b, threads=threads)
        cfg = default_config(np.float32)
        ei = int(rng.integers(0, min(cfg.block[0], m)))
        ej = int(rng.integers(0, min(cfg.block[1], k)))
        bit = int(rng.integers(23, 32))
        hook = ScheduledFaultHook(FaultSchedule([FaultEntry(0, (0, 0), (ei, ej), bit)]))
        out, rep = checked_gemm(a, b, hook=hook, threads=threads)
        tol = 1e-4 * max(1.0, float(np.abs(ref).max())) * n
        if hook.injected and abs(hook.injected[0]["delta"]) > tol:
            ok = rep.corrections == 1 and np.abs(out - ref).max() <= tol
        else:
            ok = np.abs(out.astype(np.float64) - ref.astype(np.float64)).max() <= tol
        if not ok:
            failures += 1
    return failures == 0, f"{n_cases} single-flip runs, failures: {failures}"


def exhaustive_sweep(tile_m=8, tile_n=8, seed=0, threads=None):
    """Flip every (element, bit) of one single-precision tile's accumulator.

    Returns (corrected, subthreshold, silent): every flip must either be
    corrected or induce an error within the detection threshold.
    """
    rng = np.random.default_rng(seed)
    n = 8
    a = np.ascontiguousarray(rng.random((tile_m, n)), dtype=np.float32)
    b = np.ascontiguousarray(rng.random((tile_n, n)), dtype=np.float32)
    ref = gemm_tiled(a, b)
    scale = max(1.0, float(np.abs(a).max()) * float(np.abs(b).max()))
    tol = 1e-4 * scale * n
    corrected = subthreshold = silent = 0
    for i in range(tile_m):
        for j in range(tile_n):
            for bit in range(32):
                hook = ScheduledFaultHook(
                    FaultSchedule([FaultEntry(0, (0, 0), (i, j), bit)])
                )
                out, rep = checked_gemm(a, b, hook=hook, threads=threads)
                err = float(np.abs(out.astype(np.float64) - ref.astype(np.float64)).max())
                if rep.corrections == 1 and err <= tol:
                    corrected += 1
                elif rep.detections == 0 and err <= tol:
                    subthreshold += 1
                else:
                    silent += 1
    return corrected, subthreshold, silent


def cmd_verify(args):
    threads = args.threads
    checks = [
        ("assignment-oracle", lambda: _verify_assignment_oracle(20, 11, threads)),
        ("checksum-soundness", lambda: _verify_checksums(30, 12, threads)),
        ("single-flip-correction", lambda: _verify_injection(30, 13, threads)),
    ]
    failed = False
    for name, fn in checks:
        ok, detail = fn()
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed = failed or not ok
    if args.exhaustive:
        corrected, subthreshold, silent = exhaustive_sweep(threads=threads)
        total = corrected + subthreshold + silent
        ok = silent == 0 and total == 8 * 8 * 32
        print(
            f"{'PASS' if ok else 'FAIL'} exhaustive-sweep: {total} cases, "
            f"{corrected} corrected, {subthreshold} sub-threshold, {silent} silent"
        )
        failed = failed or not ok
    return EXIT_VERIFY if failed else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ftkm", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: FTKM_THREADS or all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--rows", type=int, required=True)
    g.add_argument("--cols", type=int, required=True)
    g.add_argument("--precision", choices=["single", "double"], default="single")
    g.add_argument("--dist", default="uniform", help='"uniform" or "gm:k:spread"')
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    c = sub.add_parser("cluster", help="run fault-tolerant K-means")
    c.add_argument("--input", required=True)
    c.add_argument("--precision", choices=["single", "double"], default="single",
                   help="target precision for CSV inputs")
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--ft", choices=["off", "abft", "abft+dmr"], default="off")
    c.add_argument("--inject", default=None,
                   help='fault spec: none | prob:P | fixed:N | sweep, with @sign/@exp/@any/@b<k>')
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--max-iters", type=int, default=300)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--tile", default="auto", help='"auto" or bm,bn,bk,sm,sn,sk')
    c.add_argument("--tune-table", default=None)
    c.add_argument("--delta", type=float, default=None, help="checksum threshold scale")
    c.add_argument("--init", choices=["kmeanspp", "random-sample"], default="kmeanspp")
    c.add_argument("--report", default=None, help="write a phase,metric,value CSV")
    c.add_argument("--labels-out", default=None, help="write assignments, one per line")
    c.add_argument("--events-out", default=None, help="write the detection log CSV")
    c.add_argument("--compare", action="store_true",
                   help="also run the fault-free unprotected baseline and report overhead")
    c.set_defaults(fn=cmd_cluster)

    t = sub.add_parser("tune", help="benchmark tile configs and write a selection table")
    t.add_argument("--shapes", default="grid:default", help='"grid:default" or a CSV of M,N,K')
    t.add_argument("--precision", choices=["single", "double"], default="single")
    t.add_argument("--ft", choices=["off", "abft", "abft+dmr"], default="off")
    t.add_argument("--out", required=True)
    t.add_argument("--reps", type=int, default=10)
    t.add_argument("--probe-m", type=int, default=8192,
                   help="cap on measured sample count per shape")
    t.add_argument("--budget", type=float, default=1 << 20, help="cache budget bytes")
    t.add_argument("--space", choices=["shortlist", "full"], default="shortlist")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(fn=cmd_tune)

    b = sub.add_parser("bench", help="sweep the shape grid with protection off and on")
    b.add_argument("--grid", default="grid:default")
    b.add_argument("--precision", choices=["single", "double"], default="single")
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--tune-table", default=None)
    b.add_argument("--report", default=None)
    b.set_defaults(fn=cmd_bench)

    v = sub.add_parser("verify", help="run the oracle self-checks")
    v.add_argument("--exhaustive", action="store_true",
                   help="sweep all 8x8x32 single-precision bit flips")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ValueError, FormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
