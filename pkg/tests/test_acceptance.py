"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``. The heavyweight
benchmark-driven criteria (5 and 6) share one tuning pass; everything is
seeded and deterministic apart from wall-clock throughput numbers.
"""

import time

import numpy as np
import pytest

from ftkmeans.abft import checked_gemm
from ftkmeans.cli import exhaustive_sweep
from ftkmeans.faults import FaultEntry, FaultSchedule, FaultSpec, ScheduledFaultHook
from ftkmeans.gemm import fused_assign, gemm_tiled
from ftkmeans.kmeans import KMeansConfig, lloyd, update_step
from ftkmeans.matrix import gaussian_mixture
from ftkmeans.tuner import (
    ParamSpace,
    benchmark_pair,
    default_grid,
    m_bucket,
    select,
    shortlist,
)

_HISTORIES = []  # inertia histories gathered for criterion 8


def _report(num, ok, detail):
    print(f"\nACCEPTANCE {num} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {num}: {detail}"


@pytest.fixture(scope="module")
def warm_kernels():
    # JIT compilation is excluded from the criteria's runtime budgets
    for dt in (np.float32, np.float64):
        x = np.ones((8, 4), dtype=dt)
        y = np.ones((4, 4), dtype=dt)
        fused_assign(x, y)
        gemm_tiled(x, y)
        checked_gemm(x, y)
        hook = ScheduledFaultHook(FaultSchedule([FaultEntry(0, (0, 0), (0, 0), 4)]))
        checked_gemm(x, y, hook=hook)


@pytest.fixture(scope="module")
def tuned_table(warm_kernels):
    space = ParamSpace("single", shortlist("single"))
    return select(default_grid(), space, reps=3, probe_m=8192, seed=7)


def test_criterion_1_oracle_equivalence(warm_kernels):
    """fused_assign equals the double-precision brute-force oracle on 100
    random instances, except where the top-2 distances nearly tie."""
    rng = np.random.default_rng(101)
    t0 = time.monotonic()
    checked_rows = 0
    mismatch_rows = 0
    buckets = [(2048, 128, 256), (512, 64, 96), (256, 16, 24)]
    for case in range(100):
        cap_m, cap_n, cap_k = buckets[case % len(buckets)]
        m = int(rng.integers(8, cap_m + 1))
        n = int(rng.integers(1, cap_n + 1))
        k = int(rng.integers(1, cap_k + 1))
        dt = np.float32 if case % 2 == 0 else np.float64
        x = np.ascontiguousarray(rng.standard_normal((m, n)), dtype=dt)
        y = np.ascontiguousarray(rng.standard_normal((k, n)), dtype=dt)
        res = fused_assign(x, y)
        d = (y.astype(np.float64) ** 2).sum(axis=1)[None, :] - 2.0 * (
            x.astype(np.float64) @ y.astype(np.float64).T
        )
        oracle = np.argmin(d, axis=1)
        checked_rows += m
        bad = np.flatnonzero(res.assignments != oracle)
        for i in bad:
            mismatch_rows += 1
            row = np.sort(d[i])
            gap = row[1] - row[0] if k > 1 else 0.0
            rel = gap / max(abs(row[0]), 1e-300)
            assert rel < 1e-5, f"non-near-tie mismatch: case {case} row {i} rel gap {rel}"
    elapsed = time.monotonic() - t0
    _report(
        1,
        elapsed < 120,
        f"100 instances, {checked_rows} rows, {mismatch_rows} near-tie mismatches, "
        f"{elapsed:.1f}s (< 120s)",
    )


def test_criterion_2_checksum_soundness(warm_kernels):
    """1000 fault-free protected runs: zero detections, output bit-identical
    to the unprotected kernel."""
    rng = np.random.default_rng(202)
    t0 = time.monotonic()
    detections = 0
    mismatched = 0
    for case in range(1000):
        m = int(rng.integers(1, 192))
        n = int(rng.integers(1, 64))
        k = int(rng.integers(1, 80))
        dt = np.float32 if case % 2 == 0 else np.float64
        if case % 5 == 0:
            x = np.ascontiguousarray(rng.standard_normal((m, n)) * 100.0, dtype=dt)
        else:
            x = np.ascontiguousarray(rng.random((m, n)), dtype=dt)
        y = np.ascontiguousarray(rng.standard_normal((k, n)), dtype=dt)
        out, rep = checked_gemm(x, y)
        detections += rep.detections
        if out.tobytes() != gemm_tiled(x, y).tobytes():
            mismatched += 1
    elapsed = time.monotonic() - t0
    _report(
        2,
        detections == 0 and mismatched == 0,
        f"1000 fault-free runs: {detections} false alarms, {mismatched} bit mismatches, "
        f"{elapsed:.1f}s",
    )


def test_criterion_3_exhaustive_single_error_sweep(warm_kernels):
    """Every (element, bit) flip of an 8x8 single-precision tile is either
    corrected or stays below the detection threshold; nothing silent."""
    t0 = time.monotonic()
    corrected, subthreshold, silent = exhaustive_sweep(tile_m=8, tile_n=8, seed=303)
    elapsed = time.monotonic() - t0
    total = corrected + subthreshold + silent
    _report(
        3,
        total == 8 * 8 * 32 and silent == 0 and elapsed < 60,
        f"{total} flips: {corrected} corrected, {subthreshold} sub-threshold, "
        f"{silent} silent, {elapsed:.1f}s (< 60s)",
    )


def test_criterion_4_ft_transparency_end_to_end(warm_kernels):
    """Protected runs under 10 injected faults per iteration reproduce the
    fault-free unprotected assignments on the 4-blob benchmark."""
    t0 = time.monotonic()
    outcomes = []
    for k in (4, 128):
        x, _, _ = gaussian_mixture(65536, 8, 4, 0.25, precision="single", seed=404)
        base = lloyd(x, KMeansConfig(k=k, seed=404, max_iters=50, ft_mode="off"))
        spec = FaultSpec(mode="fixed-count", count=10, seed=405)
        prot = lloyd(
            x, KMeansConfig(k=k, seed=404, max_iters=50, ft_mode="abft+dmr"),
            fault_spec=spec,
        )
        _HISTORIES.append(base.inertia_history)
        _HISTORIES.append(prot.inertia_history)
        same = np.array_equal(base.assignments, prot.assignments)
        outcomes.append(
            (k, same, base.iters == prot.iters, prot.report.corrections,
             prot.report.uncorrectable)
        )
    elapsed = time.monotonic() - t0
    ok = all(same and iters_eq and corr > 0 and unc == 0
             for _, same, iters_eq, corr, unc in outcomes)
    detail = "; ".join(
        f"K={k}: assignments_equal={same} iters_equal={ie} corrections={c} uncorrectable={u}"
        for k, same, ie, c, u in outcomes
    )
    _report(4, ok and elapsed < 300, f"{detail}; {elapsed:.1f}s (< 300s)")


def test_criterion_5_overhead_on_default_grid(tuned_table):
    """Measured protection overhead stays within 50% on every grid shape
    (the reference GPU implementation reports 11% on average; recorded for
    comparison, not gated)."""
    rows = []
    for shape in default_grid():
        cfg = tuned_table.lookup(shape, np.float32)
        g_off, g_ft = benchmark_pair(cfg, shape, precision="single", reps=10, seed=7)
        overhead = (g_off / g_ft - 1.0) * 100.0
        rows.append((shape, g_off, g_ft, overhead))
        print(
            f"  shape M={shape[0]:6d} N={shape[1]:3d} K={shape[2]:4d}: "
            f"off {g_off:7.2f} ft {g_ft:7.2f} GFLOPS overhead {overhead:5.1f}%"
        )
    worst = max(r[3] for r in rows)
    mean = sum(r[3] for r in rows) / len(rows)
    _report(
        5,
        worst <= 50.0,
        f"32 shapes: mean overhead {mean:.1f}%, worst {worst:.1f}% (gate 50%; "
        f"reference average 11%)",
    )


def test_criterion_6_tuner_efficacy(tuned_table):
    """The tuned configuration beats the fixed default on at least 80% of
    the grid, selecting a small set of distinct configurations."""
    grid = default_grid()
    beats = 0
    for shape in grid:
        key = (m_bucket(shape[0]), shape[1], shape[2], "single")
        entry = tuned_table.entries[key]
        if entry.gflops > tuned_table.baseline[key]:
            beats += 1
    distinct = {e.config.as_tuple() for e in tuned_table.entries.values()}
    # informational: narrow output widths and narrow tiles correlate on the
    # reference hardware; predicated CPU tiles make this a tendency only
    small_k = [
        (key, e) for key, e in tuned_table.entries.items() if key[2] <= 32
    ]
    narrow = sum(1 for _, e in small_k if e.config.block[1] <= 64)
    _report(
        6,
        beats >= 0.8 * len(grid) and len(distinct) <= 10,
        f"tuned beats default on {beats}/{len(grid)} shapes, "
        f"{len(distinct)} distinct configs (<= 10); narrow tiles on "
        f"{narrow}/{len(small_k)} small-K shapes",
    )


def test_criterion_7_dmr_update_protection(warm_kernels):
    """Injected update-accumulator corruption is flagged and repaired in
    100/100 trials; fault-free duplication changes nothing."""
    rng = np.random.default_rng(707)
    repaired = 0
    for trial in range(100):
        m, n, k = 256, 6, 5
        x = np.ascontiguousarray(rng.random((m, n)), dtype=np.float32)
        assignments = rng.integers(0, k, m)
        clean, counts_clean, _ = update_step(x, assignments, k)
        bit = int(rng.integers(32, 64))
        ci = int(rng.integers(0, k))
        cj = int(rng.integers(0, n))
        hook = ScheduledFaultHook(FaultSchedule([FaultEntry(0, (0, 0), (ci, cj), bit)]))
        got, counts, events = update_step(
            x, assignments, k, ft_mode="abft+dmr", hook=hook, iteration=0
        )
        flagged = any(e.kind == "dmr-mismatch" for e in events)
        same = got.tobytes() == clean.tobytes() and counts.tobytes() == counts_clean.tobytes()
        # a flip of a zero-sum element can be a no-op; the injected log tells us
        injected = hook.injected and hook.injected[0]["delta"] != 0.0
        if (flagged and same) or (not injected and same):
            repaired += 1
    x = np.ascontiguousarray(rng.random((128, 4)), dtype=np.float32)
    assignments = rng.integers(0, 3, 128)
    plain, _, _ = update_step(x, assignments, 3, ft_mode="off")
    dmr, _, ev = update_step(x, assignments, 3, ft_mode="abft+dmr")
    clean_identical = plain.tobytes() == dmr.tobytes() and not ev
    _report(
        7,
        repaired == 100 and clean_identical,
        f"{repaired}/100 corruptions flagged and repaired; fault-free DMR "
        f"bit-identical: {clean_identical}",
    )


def test_criterion_8_monotone_inertia(warm_kernels):
    """Per-iteration inertia is non-increasing (1e-6 relative slack) across
    the acceptance clustering runs."""
    if not _HISTORIES:  # direct invocation of this test alone
        x, _, _ = gaussian_mixture(8192, 8, 4, 0.25, precision="single", seed=808)
        _HISTORIES.append(lloyd(x, KMeansConfig(k=4, seed=808)).inertia_history)
        _HISTORIES.append(lloyd(x, KMeansConfig(k=32, seed=808)).inertia_history)
    violations = 0
    steps = 0
    for hist in _HISTORIES:
        for a, b in zip(hist, hist[1:]):
            steps += 1
            if b > a * (1 + 1e-6):
                violations += 1
    _report(
        8,
        violations == 0 and steps > 0,
        f"{steps} iteration steps across {len(_HISTORIES)} runs, {violations} increases",
    )
