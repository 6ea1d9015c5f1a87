"""Cache-blocked GEMM with a fused nearest-centroid argmin epilogue.

``gemm_tiled(a, b)`` computes ``a @ b.T`` tile by tile with a fixed
deterministic accumulation order. ``fused_assign`` runs the same tile loop
but reduces every distance tile to per-row (index, value) minima as soon as
its k-loop finishes; the full distance matrix is never materialized. The
constant per-row sample norm is omitted from the minimized expression (it
cannot change the argmin), so the returned values are ``|y|^2 - 2 x.y``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .matrix import as_matrix, row_sq_norms
from .tiles import TileConfig, default_config


@dataclass
class AssignResult:
    """Per-sample nearest-centroid indices and the minimized distance expression."""

    assignments: np.ndarray
    min_dists: np.ndarray


def resolve_threads(threads):
    if threads is not None:
        n = int(threads)
    else:
        env = os.environ.get("FTKM_THREADS")
        n = int(env) if env else (os.cpu_count() or 1)
    if n < 1:
        raise ValueError(f"threads must be >= 1, got {n}")
    return n


def _check_pair(a, b, cfg):
    a = as_matrix(a)
    b = as_matrix(b)
    if a.dtype != b.dtype:
        raise ValueError(f"operand dtypes differ: {a.dtype} vs {b.dtype}")
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"inner dimensions differ: {a.shape[1]} vs {b.shape[1]} "
            "(second operand is indexed transposed)"
        )
    if cfg is None:
        cfg = default_config(a.dtype)
    elif isinstance(cfg, TileConfig):
        cfg.validate()
    else:
        raise ValueError(f"cfg must be a TileConfig or None, got {type(cfg)!r}")
    return a, b, cfg


def _run_ranges(fn, nbi, threads):
    ranges = _k.split_ranges(nbi, threads)
    if len(ranges) == 1:
        fn(*ranges[0])
        return
    with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
        futures = [pool.submit(fn, lo, hi) for lo, hi in ranges]
        for f in futures:
            f.result()


def gemm_tiled(a, b, cfg=None, threads=None):
    """Compute ``a @ b.T`` (shapes MxK' and N'xK') with the tiled kernel."""
    a, b, cfg = _check_pair(a, b, cfg)
    threads = resolve_threads(threads)
    out = np.empty((a.shape[0], b.shape[0]), dtype=a.dtype)
    (bm, bn, bk), (sm, sn, _), (um, _, _) = cfg.block, cfg.sub, cfg.micro
    nbi = (a.shape[0] + bm - 1) // bm

    def run(lo, hi):
        _k._gemm_range(a, b, out, bm, bn, bk, sm, sn, um, lo, hi)

    _run_ranges(run, nbi, threads)
    return out


def fused_assign(x, y, y_norms=None, cfg=None, threads=None, hook=None, iteration=0):
    """Assign each row of ``x`` to the nearest row of ``y``.

    ``y_norms`` are the squared row norms of ``y`` (computed when omitted).
    Ties break toward the lowest centroid index. Returns an
    :class:`AssignResult`; ``min_dists`` holds ``|y|^2 - 2 x.y`` at the
    winning index (add the per-sample ``|x|^2`` for true squared distances).

    ``hook`` optionally injects scheduled faults into the (unprotected)
    accumulator tiles; the corruption then flows straight to the result.
    """
    x, y, cfg = _check_pair(x, y, cfg)
    if y_norms is None:
        y_norms = row_sq_norms(y)
    y_norms = np.ascontiguousarray(y_norms, dtype=x.dtype)
    if y_norms.shape != (y.shape[0],):
        raise ValueError(f"y_norms must have length {y.shape[0]}")
    threads = resolve_threads(threads)
    (bm, bn, bk), (sm, sn, _), (um, _, _) = cfg.block, cfg.sub, cfg.micro
    m = x.shape[0]
    out_idx = np.empty(m, dtype=np.int64)
    out_val = np.empty(m, dtype=x.dtype)
    nbi = (m + bm - 1) // bm

    inj = hook.kernel_arrays(iteration, x.dtype) if hook is not None else None
    if inj is None:
        z = np.zeros(0, dtype=np.int64)
        inj = (z, z, z, z, z, z.copy(), np.zeros(0), np.zeros(0))
    inj_bi, inj_bj, inj_ei, inj_ej, inj_bit, inj_applied, inj_before, inj_after = inj

    ranges = _k.split_ranges(nbi, threads)
    buffers = []
    for _ in ranges:
        fbuf = np.zeros(1, dtype=x.dtype)
        ibuf = fbuf.view(np.uint32 if x.dtype == np.float32 else np.uint64)
        buffers.append((fbuf, ibuf))

    def run(worker, lo, hi):
        fbuf, ibuf = buffers[worker]
        _k._assign_range(
            x, y, y_norms, bm, bn, bk, sm, sn, um, lo, hi, out_idx, out_val,
            inj_bi, inj_bj, inj_ei, inj_ej, inj_bit, inj_applied, inj_before, inj_after,
            fbuf, ibuf,
        )

    if len(ranges) == 1:
        run(0, *ranges[0])
    else:
        with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
            for f in [pool.submit(run, w, lo, hi) for w, (lo, hi) in enumerate(ranges)]:
                f.result()
    if hook is not None:
        hook.absorb_kernel_results(iteration, inj_applied, inj_before, inj_after)
    return AssignResult(assignments=out_idx, min_dists=out_val)


def true_sq_dists(result, x):
    """Reconstitute true squared distances by adding the omitted ``|x|^2`` term."""
    return result.min_dists.astype(np.float64) + row_sq_norms(x).astype(np.float64)
