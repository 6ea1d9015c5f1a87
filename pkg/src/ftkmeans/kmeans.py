"""Lloyd's iteration: fused assignment, protected centroid update, convergence.

Each iteration assigns every sample to its nearest centroid through the
fused GEMM epilogue (optionally checksum-protected), then recomputes the
centroids as per-cluster means. The update phase is memory-bound, so in
``abft+dmr`` mode its accumulators are simply computed twice and compared
bitwise; a mismatch triggers one deterministic retry. Phases are barriers:
assignment completes before the update starts.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from .abft import DetectionEvent, DetectionReport, Threshold, checked_assign
from .errors import FaultEscalationError
from .faults import NOOP_HOOK, FaultSpec, ScheduledFaultHook, plan_faults
from .gemm import fused_assign, resolve_threads
from .matrix import as_matrix, row_sq_norms
from .tiles import TileConfig, default_config

FT_MODES = ("off", "abft", "abft+dmr")
INIT_METHODS = ("random-sample", "kmeanspp")


@dataclass
class KMeansConfig:
    k: int
    max_iters: int = 300
    tol: float = 1e-4
    seed: int = 0
    ft_mode: str = "off"
    init: str = "kmeanspp"
    tile: object = "auto"  # TileConfig or "auto"
    threshold: Threshold = None
    threads: int = None
    tune_table: object = None

    def validate(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.tol < 0:
            raise ValueError(f"tol must be >= 0, got {self.tol}")
        if self.ft_mode not in FT_MODES:
            raise ValueError(f"ft_mode must be one of {FT_MODES}, got {self.ft_mode!r}")
        if self.init not in INIT_METHODS:
            raise ValueError(f"init must be one of {INIT_METHODS}, got {self.init!r}")
        return self


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    iters: int
    converged: bool
    report: DetectionReport
    timings: dict = field(default_factory=dict)
    inertia_history: list = field(default_factory=list)


def init_centroids(x, k, seed=0, method="kmeanspp"):
    """Deterministic initial centroids.

    ``random-sample`` draws k distinct rows uniformly; ``kmeanspp`` is
    standard D^2 seeding (next center sampled with probability proportional
    to the squared distance to the nearest chosen one).
    """
    x = as_matrix(x)
    m = x.shape[0]
    if k > m:
        raise ValueError(f"k={k} exceeds the number of samples {m}")
    if method not in INIT_METHODS:
        raise ValueError(f"unknown init method {method!r}")
    rng = np.random.default_rng(seed)
    if method == "random-sample":
        idx = rng.choice(m, size=k, replace=False)
        return np.ascontiguousarray(x[idx])
    # D^2 seeding, computed in float64 for stable probabilities
    x64 = x.astype(np.float64)
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, m))
    centers[0] = x64[first]
    d2 = ((x64 - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all points coincide with chosen centers; fall back to uniform
            pick = int(rng.integers(0, m))
        else:
            r = rng.random() * total
            pick = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            pick = min(pick, m - 1)
        centers[c] = x64[pick]
        d2 = np.minimum(d2, ((x64 - centers[c]) ** 2).sum(axis=1))
    return np.ascontiguousarray(centers, dtype=x.dtype)


def _resolve_tile(tile, x, k, tune_table):
    if isinstance(tile, TileConfig):
        return tile.validate()
    if tile == "auto":
        if tune_table is not None:
            return tune_table.lookup((x.shape[0], x.shape[1], k), x.dtype)
        return default_config(x.dtype)
    raise ValueError(f"tile must be a TileConfig or 'auto', got {tile!r}")


def assign_step(x, y, cfg=None, ft_mode="off", hook=NOOP_HOOK, thr=None, iteration=0, threads=None):
    """One nearest-centroid assignment pass.

    With ``ft_mode='off'`` this is the plain fused kernel; otherwise the
    distance tiles flow through the checksum-protected kernel (identical
    contract, plus a DetectionReport). Injection hooks apply in both modes;
    unprotected runs simply keep the corruption.
    """
    if ft_mode == "off":
        return (
            fused_assign(x, y, cfg=cfg, threads=threads, hook=hook, iteration=iteration),
            None,
        )
    res, report = checked_assign(
        x, y, cfg=cfg, thr=thr, hook=hook, iteration=iteration, threads=threads
    )
    return res, report


def update_step(
    x,
    assignments,
    k,
    ft_mode="off",
    hook=NOOP_HOOK,
    iteration=0,
    sq_dists=None,
):
    """Per-cluster means with deterministic accumulation.

    Sums are accumulated in float64 in ascending sample order (bincount per
    feature), so results are independent of worker count. In ``abft+dmr``
    mode both the sums and the counts are accumulated twice and compared
    bitwise; a mismatch is retried once and then escalated.

    Empty clusters are re-seeded with the point farthest from its assigned
    centroid (successive farthest points when several clusters are empty).
    ``sq_dists`` supplies those distances when the caller already has them.

    Returns ``(centroids, counts, events)``.
    """
    x = as_matrix(x)
    assignments = np.asarray(assignments)
    m, n = x.shape
    if assignments.shape != (m,):
        raise ValueError(f"assignments must have shape ({m},)")
    if assignments.size and (assignments.min() < 0 or assignments.max() >= k):
        raise ValueError("assignments out of range")
    events = []
    dmr = ft_mode == "abft+dmr"

    def accumulate(corrupt):
        sums = np.zeros((k, n), dtype=np.float64)
        for f in range(n):
            sums[:, f] = np.bincount(assignments, weights=x[:, f], minlength=k)
        counts = np.bincount(assignments, minlength=k).astype(np.int64)
        if corrupt:
            hook.maybe_corrupt(iteration, (0, 0), sums)
        return sums, counts

    sums_a, counts_a = accumulate(corrupt=True)
    if dmr:
        sums_b, counts_b = accumulate(corrupt=False)
        if sums_a.tobytes() != sums_b.tobytes() or counts_a.tobytes() != counts_b.tobytes():
            events.append(
                DetectionEvent(iteration=iteration, tile=(0, 0), kind="dmr-mismatch",
                               loc=(-1, -1), delta=0.0)
            )
            sums_a, counts_a = accumulate(corrupt=True)
            sums_b, counts_b = accumulate(corrupt=False)
            if sums_a.tobytes() != sums_b.tobytes() or counts_a.tobytes() != counts_b.tobytes():
                raise FaultEscalationError(
                    f"update-phase DMR mismatch persisted after retry (iteration {iteration})"
                )

    counts = counts_a
    sums = sums_a
    centroids = np.zeros((k, n), dtype=np.float64)
    nonempty = counts > 0
    centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

    empty = np.flatnonzero(~nonempty)
    if empty.size:
        if sq_dists is None:
            own = centroids[assignments]
            sq_dists = ((x.astype(np.float64) - own) ** 2).sum(axis=1)
        sq = np.asarray(sq_dists, dtype=np.float64).copy()
        for j in empty:
            far = int(np.argmax(sq))
            centroids[j] = x[far].astype(np.float64)
            sq[far] = -np.inf
    return np.ascontiguousarray(centroids, dtype=x.dtype), counts, events


def lloyd(x, config, fault_spec=None):
    """Run Lloyd's iteration until assignments stabilize, centroid movement
    drops below the tolerance, or ``max_iters`` is reached.

    ``fault_spec`` (a :class:`FaultSpec` or spec string) pre-plans a
    deterministic injection campaign against the configured targets.
    """
    x = as_matrix(x)
    config.validate()
    m, n = x.shape
    if config.k > m:
        raise ValueError(f"k={config.k} exceeds the number of samples {m}")
    threads = resolve_threads(config.threads)
    cfg = _resolve_tile(config.tile, x, config.k, config.tune_table)
    thr = config.threshold or Threshold.default_for(x.dtype)

    if isinstance(fault_spec, str):
        fault_spec = FaultSpec.parse(fault_spec)
    gemm_hook = NOOP_HOOK
    update_hook = NOOP_HOOK
    if fault_spec is not None and fault_spec.mode != "none":
        bm, bn = cfg.block[0], cfg.block[1]
        grid = ((m + bm - 1) // bm, (config.k + bn - 1) // bn)
        horizon = max(config.max_iters, 1)
        if fault_spec.target in ("gemm-accumulator", "both"):
            sched = plan_faults(
                fault_spec, horizon, grid, (bm, bn), dtype=x.dtype, shape=(m, config.k)
            )
            gemm_hook = ScheduledFaultHook(sched)
        if fault_spec.target in ("update-accumulator", "both"):
            sched = plan_faults(
                dataclasses.replace(fault_spec, seed=fault_spec.seed + 1),
                horizon,
                (1, 1),
                (config.k, n),
                dtype=np.float64,
                shape=(config.k, n),
            )
            update_hook = ScheduledFaultHook(sched)

    timings = {"init_ns": 0, "assign_ns": 0, "update_ns": 0, "total_ns": 0}
    t_total = time.perf_counter_ns()
    t0 = time.perf_counter_ns()
    centroids = init_centroids(x, config.k, seed=config.seed, method=config.init)
    timings["init_ns"] = time.perf_counter_ns() - t0

    x_sq = row_sq_norms(x).astype(np.float64)
    report = DetectionReport()
    assignments = None
    inertia_history = []
    converged = False
    iters = 0
    eps = float(np.finfo(x.dtype).eps)

    for it in range(config.max_iters):
        t0 = time.perf_counter_ns()
        res, rep = assign_step(
            x, centroids, cfg=cfg,
            ft_mode=config.ft_mode, hook=gemm_hook, thr=thr, iteration=it, threads=threads,
        )
        timings["assign_ns"] += time.perf_counter_ns() - t0
        if rep is not None:
            report.merge(rep)
        new_assignments = res.assignments
        sq_dists = res.min_dists.astype(np.float64) + x_sq
        inertia_history.append(max(0.0, float(sq_dists.sum())))

        unchanged = assignments is not None and np.array_equal(assignments, new_assignments)
        assignments = new_assignments

        t0 = time.perf_counter_ns()
        new_centroids, _, ev = update_step(
            x, assignments, config.k,
            ft_mode=config.ft_mode, hook=update_hook, iteration=it, sq_dists=sq_dists,
        )
        timings["update_ns"] += time.perf_counter_ns() - t0
        report.events.extend(ev)
        iters = it + 1

        move_num = np.linalg.norm(
            new_centroids.astype(np.float64) - centroids.astype(np.float64), axis=1
        )
        move_den = np.linalg.norm(centroids.astype(np.float64), axis=1) + eps
        moved = float((move_num / move_den).max()) if config.k else 0.0
        centroids = new_centroids
        if unchanged or moved < config.tol:
            converged = True
            break

    # Final assignment against the final centroids (also covers max_iters=0).
    res, rep = assign_step(
        x, centroids, cfg=cfg,
        ft_mode=config.ft_mode, hook=gemm_hook, thr=thr, iteration=iters, threads=threads,
    )
    if rep is not None:
        report.merge(rep)
    assignments = res.assignments
    inertia = max(0.0, float((res.min_dists.astype(np.float64) + x_sq).sum()))
    timings["total_ns"] = time.perf_counter_ns() - t_total

    return KMeansResult(
        centroids=centroids,
        assignments=assignments,
        inertia=inertia,
        iters=iters,
        converged=converged,
        report=report,
        timings=timings,
        inertia_history=inertia_history,
    )
