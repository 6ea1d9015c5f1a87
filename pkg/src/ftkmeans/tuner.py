"""Tile-parameter search: enumerate, filter, benchmark, select, persist.

The enumeration follows the generation rules (powers of two, shared k
extent between block and sub level, divisibility, sub/micro area ratio of
8 or 16) with the micro kernel fixed per precision by default. Selection
benchmarks candidates per shape and keeps the fastest feasible config;
measurements run at a capped sample count (``probe_m``) because selection
is driven by the feature and cluster dimensions, and the table buckets the
sample count anyway.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .abft import checked_assign
from .gemm import fused_assign
from .matrix import dtype_of, precision_of
from .tiles import MICRO_DOUBLE, MICRO_SINGLE, TileConfig, default_config, make_config

DEFAULT_CACHE_BUDGET = 1 << 20  # 1 MiB working-set budget per block tile

# M in {2^14, 2^17} x N in {2,8,32,128} x K in {8,32,128,1024}: 32 shapes.
GRID_M = (2**14, 2**17)
GRID_N = (2, 8, 32, 128)
GRID_K = (8, 32, 128, 1024)


def default_grid():
    return [(m, n, k) for m in GRID_M for n in GRID_N for k in GRID_K]


@dataclass
class ParamSpace:
    precision: str
    configs: list


def _pow2_range(lo, hi):
    v = 1
    while v < lo:
        v *= 2
    out = []
    while v <= hi:
        out.append(v)
        v *= 2
    return out


def enumerate_configs(precision, bounds=None):
    """All rule-satisfying tile configurations within the bounds.

    ``bounds`` may override ``block_mn`` ((min, max) for block m and n),
    ``block_k`` (iterable of k extents) and ``micro`` (an (m, n, k) triple).
    """
    dt = dtype_of(precision)
    bounds = dict(bounds or {})
    b_lo, b_hi = bounds.get("block_mn", (32, 256))
    bks = tuple(bounds.get("block_k", (8, 16, 32)))
    micro = tuple(bounds.get("micro") or (MICRO_SINGLE if dt == np.float32 else MICRO_DOUBLE))
    um, un, _ = micro

    configs = []
    sub_area = (8 * um * un, 16 * um * un)
    sms = _pow2_range(um, b_hi)
    for sm in sms:
        for area in sub_area:
            if area % sm:
                continue
            sn = area // sm
            if sn < un or sn & (sn - 1):
                continue
            for bm in _pow2_range(max(b_lo, sm), b_hi):
                for bn in _pow2_range(max(b_lo, sn), b_hi):
                    for bk in bks:
                        configs.append(make_config((bm, bn, bk), (sm, sn, bk), micro))
    configs.sort(key=lambda c: c.as_tuple())
    if not configs:
        raise ValueError("empty tile parameter space under the given bounds")
    return ParamSpace(precision=precision_of(dt), configs=configs)


def shortlist(precision):
    """Curated candidate set: the reference configurations plus a spread of
    block aspect ratios. Small by design, mirroring the observation that a
    handful of parameter groups covers every shape."""
    dt = dtype_of(precision)
    if dt == np.float32:
        raw = [
            ((32, 256, 16), (32, 64, 16)),   # fixed reference parameters
            ((256, 32, 16), (64, 32, 16)),
            ((128, 64, 16), (32, 64, 16)),
            ((64, 128, 16), (64, 32, 16)),
            ((128, 128, 16), (64, 32, 16)),
            ((128, 64, 32), (32, 64, 32)),
            ((256, 64, 16), (64, 32, 16)),
            ((64, 64, 16), (32, 32, 16)),
            ((128, 32, 16), (64, 32, 16)),
            ((256, 128, 32), (64, 32, 32)),
        ]
        micro = MICRO_SINGLE
    else:
        raw = [
            ((64, 64, 16), (32, 32, 16)),    # fixed reference parameters
            ((128, 32, 16), (32, 32, 16)),
            ((128, 64, 16), (32, 32, 16)),
            ((256, 32, 16), (32, 32, 16)),
            ((128, 128, 16), (32, 32, 16)),
            ((64, 32, 16), (32, 32, 16)),
            ((128, 64, 32), (32, 32, 32)),
            ((256, 64, 16), (64, 16, 16)),
            ((32, 128, 16), (16, 64, 16)),
            ((256, 128, 32), (32, 32, 32)),
        ]
        micro = MICRO_DOUBLE
    return [make_config(b, s, micro) for b, s in raw]


def working_set_bytes(cfg, itemsize, ft_on=False):
    bm, bn, bk = cfg.block
    ws = (bm * bk + bk * bn) * itemsize
    if ft_on:
        # e1/e2 input encodings plus the running output checksums, in f64
        ws += (2 * bk + 2 * bn) * 8
    return ws


def feasible(cfg, shape, cache_budget=DEFAULT_CACHE_BUDGET, precision="single", ft_on=False):
    """True when one block tile's working set fits the cache budget.

    The tile-versus-padded-shape comparison can never fail (a dimension
    padded up to the tile size is at least the tile size); it is kept for
    contract completeness.
    """
    itemsize = dtype_of(precision).itemsize
    if working_set_bytes(cfg, itemsize, ft_on) > cache_budget:
        return False
    m, n, k = shape
    bm, bn, bk = cfg.block
    for tile, dim in ((bm, m), (bn, k), (bk, n)):
        padded = ((dim + tile - 1) // tile) * tile
        if tile > padded + tile:
            return False
    return True


def benchmark(
    cfg, shape, precision="single", reps=10, ft_mode="off", seed=0, threads=None,
    min_rep_seconds=0.015,
):
    """Median throughput of ``reps`` timed fused-assignment runs, in GFLOPS.

    The first (warm-up) run is excluded; its duration sizes an inner loop so
    each timed rep lasts at least ``min_rep_seconds`` (tiny shapes would
    otherwise be pure timer noise). FLOPs are counted as 2*M*N*K.
    """
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    m, n, k = shape
    dt = dtype_of(precision)
    rng = np.random.default_rng(seed)
    x = np.ascontiguousarray(rng.random((m, n)), dtype=dt)
    y = np.ascontiguousarray(rng.random((k, n)), dtype=dt)

    def run():
        if ft_mode == "off":
            fused_assign(x, y, cfg=cfg, threads=threads)
        else:
            checked_assign(x, y, cfg=cfg, threads=threads)

    t0 = time.perf_counter()
    run()  # warm-up (and JIT) excluded
    t_warm = time.perf_counter() - t0
    inner = max(1, int(math.ceil(min_rep_seconds / max(t_warm, 1e-9))))
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            run()
        times.append((time.perf_counter() - t0) / inner)
    t = float(np.median(times))
    return 2.0 * m * n * k / t / 1e9


def benchmark_pair(cfg, shape, precision="single", reps=10, seed=0, threads=None,
                   min_rep_seconds=0.015):
    """Throughput with protection off and on, measured interleaved.

    Alternating the two modes rep by rep cancels slow clock drift that
    would otherwise masquerade as overhead. Returns (gflops_off, gflops_ft).
    """
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    m, n, k = shape
    dt = dtype_of(precision)
    rng = np.random.default_rng(seed)
    x = np.ascontiguousarray(rng.random((m, n)), dtype=dt)
    y = np.ascontiguousarray(rng.random((k, n)), dtype=dt)

    def run_off():
        fused_assign(x, y, cfg=cfg, threads=threads)

    def run_ft():
        checked_assign(x, y, cfg=cfg, threads=threads)

    t0 = time.perf_counter()
    run_off()
    t_warm = time.perf_counter() - t0
    run_ft()
    inner = max(1, int(math.ceil(min_rep_seconds / max(t_warm, 1e-9))))
    t_off, t_ft = [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        for _ in range(inner):
            run_off()
        t_off.append((time.perf_counter() - t0) / inner)
        t0 = time.perf_counter()
        for _ in range(inner):
            run_ft()
        t_ft.append((time.perf_counter() - t0) / inner)
    flops = 2.0 * m * n * k
    return flops / float(np.median(t_off)) / 1e9, flops / float(np.median(t_ft)) / 1e9


def m_bucket(m):
    return 1 << int(math.floor(math.log2(max(m, 1))))


@dataclass
class TuneEntry:
    config: TileConfig
    gflops: float
    reps: int


@dataclass
class TuneTable:
    """Per-shape tile selections keyed by (M-bucket, N, K, precision)."""

    entries: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)  # default-config gflops, not serialized

    def put(self, shape, precision, config, gflops, reps):
        mb = m_bucket(shape[0])
        self.entries[(mb, shape[1], shape[2], precision)] = TuneEntry(config, gflops, reps)

    def lookup(self, shape, dtype):
        """Stored config for the shape, else nearest stored (N, K) by
        log-distance, else the built-in default."""
        prec = precision_of(dtype_of(dtype))
        key = (m_bucket(shape[0]), shape[1], shape[2], prec)
        if key in self.entries:
            return self.entries[key].config
        candidates = [k for k in self.entries if k[3] == prec]
        if candidates:
            ln, lk = math.log2(shape[1]), math.log2(max(shape[2], 1))
            best = min(
                candidates,
                key=lambda c: (math.log2(c[1]) - ln) ** 2 + (math.log2(max(c[2], 1)) - lk) ** 2,
            )
            return self.entries[best].config
        return default_config(dtype_of(dtype))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write("# M_bucket,N,K,precision,bm,bn,bk,sm,sn,sk,um,un,uk,gflops,reps\n")
            for (mb, n, k, prec), e in sorted(self.entries.items()):
                nums = ",".join(str(v) for v in e.config.as_tuple())
                fh.write(f"{mb},{n},{k},{prec},{nums},{e.gflops!r},{e.reps}\n")

    @staticmethod
    def load(path):
        table = TuneTable()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split(",")
                if len(parts) != 15:
                    raise ValueError(f"bad tune-table row: {line!r}")
                mb, n, k = int(parts[0]), int(parts[1]), int(parts[2])
                prec = parts[3]
                nums = [int(v) for v in parts[4:13]]
                cfg = make_config(nums[0:3], nums[3:6], nums[6:9])
                table.entries[(mb, n, k, prec)] = TuneEntry(
                    cfg, float(parts[13]), int(parts[14])
                )
        return table


def select(
    shapes,
    space,
    ft_mode="off",
    reps=10,
    probe_m=8192,
    cache_budget=DEFAULT_CACHE_BUDGET,
    seed=0,
    threads=None,
    progress=None,
):
    """Benchmark the space per shape and keep the fastest feasible config.

    Ties go to the smaller block area. Throughput is measured at
    ``min(M, probe_m)`` samples (selection is driven by N and K; the table
    key buckets M). Raises when a shape has no feasible candidate.
    """
    if not shapes:
        raise ValueError("no shapes to tune")
    precision = space.precision
    default = default_config(dtype_of(precision))
    table = TuneTable()
    cache = {}
    for shape in shapes:
        m, n, k = shape
        cands = [
            c
            for c in space.configs
            if feasible(c, shape, cache_budget, precision, ft_on=(ft_mode != "off"))
        ]
        if not cands:
            raise ValueError(f"no feasible tile config for shape {shape}")
        if default not in cands and feasible(
            default, shape, cache_budget, precision, ft_on=(ft_mode != "off")
        ):
            cands.append(default)
        probe = (min(m, probe_m), n, k)
        best = None
        for c in cands:
            key = (c.as_tuple(), probe)
            if key not in cache:
                cache[key] = benchmark(
                    c, probe, precision=precision, reps=reps, ft_mode=ft_mode,
                    seed=seed, threads=threads,
                )
                if progress:
                    progress(shape, c, cache[key])
            gf = cache[key]
            rank = (-gf, c.block[0] * c.block[1])
            if best is None or rank < best[0]:
                best = (rank, c, gf)
        table.put(shape, precision, best[1], best[2], reps)
        dkey = (default.as_tuple(), probe)
        if dkey in cache:
            table.baseline[(m_bucket(m), n, k, precision)] = cache[dkey]
    return table


def bench_shapes(
    shapes=None,
    precision="single",
    reps=10,
    tune_table=None,
    seed=0,
    threads=None,
    progress=None,
):
    """Per-shape throughput with protection off and on, plus the overhead.

    Returns a list of row dicts (the ``bench`` command serializes them).
    """
    shapes = list(shapes) if shapes is not None else default_grid()
    dt = dtype_of(precision)
    rows = []
    for shape in shapes:
        cfg = tune_table.lookup(shape, dt) if tune_table is not None else default_config(dt)
        g_off, g_ft = benchmark_pair(cfg, shape, precision, reps=reps, seed=seed, threads=threads)
        overhead = (g_off - g_ft) / g_ft if g_ft > 0 else float("inf")
        row = {
            "M": shape[0],
            "N": shape[1],
            "K": shape[2],
            "precision": precision_of(dt),
            "config": str(cfg),
            "gflops_off": g_off,
            "gflops_ft": g_ft,
            "overhead_pct": 100.0 * overhead,
        }
        rows.append(row)
        if progress:
            progress(row)
    return rows
