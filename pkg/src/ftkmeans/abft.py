"""Two-vector checksum protection for the tiled GEMM, plus a DMR guard.

Input tiles are encoded with the all-ones vector e1 and the ramp vector
e2 = [1, 2, ...] (tile-local, 1-based). In a fault-free tile the column
sums of the accumulated product match the e1-encoded input product within
a threshold; a single corrupted element diverges in exactly one column and
one row, the e2/e1 quotients recover its coordinates, and subtracting the
e1 divergence restores it in place. Verification runs after every k-block
of every tile, so one error per tile per interval is corrected before the
tile reaches any epilogue.

``dmr_reduce`` covers the scalar reductions of the centroid-update phase:
the reduction runs twice through independent accumulators in the same
order and any bitwise disagreement triggers one deterministic retry.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .errors import FaultEscalationError
from .gemm import AssignResult, _check_pair, resolve_threads
from .matrix import row_sq_norms

KIND_NAMES = {
    _k.EV_CORRECTED: "detected-corrected",
    _k.EV_UNCORRECTABLE: "detected-uncorrectable",
    2: "dmr-mismatch",
}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}

REPORT_HEADER = ["iteration", "tile_i", "tile_j", "kind", "loc_i", "loc_j", "delta"]


@dataclass(frozen=True)
class Threshold:
    """Checksum comparison tolerance.

    In relative mode a tile's violation cutoff is
    ``delta_rel * max(1, max|a_block| * max|b_block|) * k_accumulated``,
    which scales with both the operand magnitudes and the accumulation
    length. Absolute mode compares against ``delta_rel`` directly.
    """

    delta_rel: float
    mode: str = "relative"

    def __post_init__(self):
        if not self.delta_rel > 0:
            raise ValueError(f"delta_rel must be positive, got {self.delta_rel}")
        if self.mode not in ("relative", "absolute"):
            raise ValueError(f"unknown threshold mode {self.mode!r}")

    @staticmethod
    def default_for(dtype):
        return Threshold(1e-4 if np.dtype(dtype) == np.float32 else 1e-10)

    def kernel_params(self):
        # (delta_rel, abs_tol) as consumed by the checked kernel.
        if self.mode == "relative":
            return float(self.delta_rel), 0.0
        return 0.0, float(self.delta_rel)


@dataclass
class DetectionEvent:
    iteration: int
    tile: tuple
    kind: str
    loc: tuple
    delta: float
    interval: int = 0


@dataclass
class DetectionReport:
    """Log of checksum and DMR events for one or more protected runs."""

    events: list = field(default_factory=list)
    false_alarms: int = 0

    @property
    def detections(self):
        return len(self.events)

    @property
    def corrections(self):
        return sum(1 for e in self.events if e.kind == "detected-corrected")

    @property
    def uncorrectable(self):
        return sum(1 for e in self.events if e.kind == "detected-uncorrectable")

    @property
    def dmr_mismatches(self):
        return sum(1 for e in self.events if e.kind == "dmr-mismatch")

    def merge(self, other):
        self.events.extend(other.events)
        self.false_alarms += other.false_alarms
        return self

    def to_csv(self, path_or_file):
        close = False
        fh = path_or_file
        if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
            fh = open(path_or_file, "w", newline="")
            close = True
        try:
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for e in self.events:
                w.writerow(
                    [e.iteration, e.tile[0], e.tile[1], e.kind, e.loc[0], e.loc[1], repr(e.delta)]
                )
        finally:
            if close:
                fh.close()

    @staticmethod
    def from_csv(path):
        rep = DetectionReport()
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        for row in rows[1:]:
            it, ti, tj, kind, li, lj, delta = row
            rep.events.append(
                DetectionEvent(int(it), (int(ti), int(tj)), kind, (int(li), int(lj)), float(delta))
            )
        return rep

    def to_csv_text(self):
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()


@dataclass
class ChecksumSet:
    """All checksums guarding one GEMM tile ``d = x_tile @ y_tile.T``.

    ``colsum*`` encode the sample tile down its rows, ``rowsum*`` encode the
    (logically transposed) centroid tile across the output columns, and the
    ``outsum`` vectors are the products of encodings with the other operand:
    in exact arithmetic they equal the column and row sums of the result.
    """

    colsum1: np.ndarray
    colsum2: np.ndarray
    rowsum1: np.ndarray
    rowsum2: np.ndarray
    outsum_c1: np.ndarray
    outsum_c2: np.ndarray
    outsum_r1: np.ndarray
    outsum_r2: np.ndarray

    @staticmethod
    def from_tiles(x_tile, y_tile):
        x64 = np.asarray(x_tile, dtype=np.float64)
        y64 = np.asarray(y_tile, dtype=np.float64)
        c1, c2 = encode_cols(x64)
        r1, r2 = encode_rows(y64.T)
        return ChecksumSet(
            colsum1=c1,
            colsum2=c2,
            rowsum1=r1,
            rowsum2=r2,
            outsum_c1=y64 @ c1,
            outsum_c2=y64 @ c2,
            outsum_r1=x64 @ r1,
            outsum_r2=x64 @ r2,
        )

    def verify(self, d_tile, tol):
        """Column/row sums of the result against the encoded references.

        Returns (col_ok, row_ok) for the e1 relations at tolerance ``tol``.
        """
        d64 = np.asarray(d_tile, dtype=np.float64)
        col_ok = bool(np.all(np.abs(d64.sum(axis=0) - self.outsum_c1) <= tol))
        row_ok = bool(np.all(np.abs(d64.sum(axis=1) - self.outsum_r1) <= tol))
        return col_ok, row_ok


def encode_cols(tile):
    """e1- and e2-weighted column sums of a tile (weights over the row index)."""
    t = np.asarray(tile, dtype=np.float64)
    if t.ndim != 2 or t.size == 0:
        raise ValueError("tile must be a non-empty 2-D array")
    w = np.arange(1, t.shape[0] + 1, dtype=np.float64)
    return t.sum(axis=0), w @ t


def encode_rows(tile):
    """e1- and e2-weighted row sums of a tile (weights over the column index)."""
    t = np.asarray(tile, dtype=np.float64)
    if t.ndim != 2 or t.size == 0:
        raise ValueError("tile must be a non-empty 2-D array")
    w = np.arange(1, t.shape[1] + 1, dtype=np.float64)
    return t.sum(axis=1), t @ w


def locate(d_c1, d_c2, d_r1, d_r2, tol, tile_shape=None):
    """Recover a single error's tile-local coordinates from checksum divergences.

    Returns ``(i, j, delta)`` with ``i = round(d_r2/d_r1) - 1`` and
    ``j = round(d_c2/d_c1) - 1`` (0-based), or None when the quotients are
    non-integral beyond 0.05 of an index step, out of range, or the two
    e1 divergences disagree beyond the tolerance.
    """
    vals = (d_c1, d_c2, d_r1, d_r2)
    if not all(math.isfinite(v) for v in vals):
        return None
    if abs(d_c1 - d_r1) > max(tol, 0.05 * abs(d_c1)):
        return None
    if d_c1 == 0.0 or d_r1 == 0.0:
        return None
    qi = d_r2 / d_r1
    qj = d_c2 / d_c1
    i = int(math.floor(qi + 0.5))
    j = int(math.floor(qj + 0.5))
    if abs(qi - i) > 0.05 or abs(qj - j) > 0.05 or i < 1 or j < 1:
        return None
    if tile_shape is not None and (i > tile_shape[0] or j > tile_shape[1]):
        return None
    return i - 1, j - 1, d_c1


def correct(tile, i, j, delta):
    """Subtract a located divergence from the tile in place."""
    if not (0 <= i < tile.shape[0] and 0 <= j < tile.shape[1]):
        raise ValueError(f"({i},{j}) outside tile {tile.shape}")
    tile[i, j] -= tile.dtype.type(delta)


def _empty_injection():
    z = np.zeros(0, dtype=np.int64)
    return z, z.copy(), z.copy(), z.copy(), z.copy()


def _checked_run(a, b, cfg, thr, hook, iteration, threads, ynorms, materialize):
    """Shared driver for checked_gemm / checked_assign."""
    threads = resolve_threads(threads)
    if thr is None:
        thr = Threshold.default_for(a.dtype)
    delta_rel, abs_tol = thr.kernel_params()
    (bm, bn, bk), (sm, sn, _), (um, _, _) = cfg.block, cfg.sub, cfg.micro
    m = a.shape[0]
    nbi = (m + bm - 1) // bm

    if hook is not None:
        inj = hook.kernel_arrays(iteration, a.dtype)
    else:
        inj = None
    if inj is None:
        inj_bi, inj_bj, inj_ei, inj_ej, inj_bit = _empty_injection()
        inj_applied = np.zeros(0, dtype=np.int64)
        inj_before = np.zeros(0, dtype=np.float64)
        inj_after = np.zeros(0, dtype=np.float64)
    else:
        inj_bi, inj_bj, inj_ei, inj_ej, inj_bit, inj_applied, inj_before, inj_after = inj

    if materialize:
        out = np.empty((m, b.shape[0]), dtype=a.dtype)
        out_idx = np.zeros(1, dtype=np.int64)
        out_val = np.zeros(1, dtype=a.dtype)
        yn = np.zeros(1, dtype=a.dtype)
    else:
        out = np.empty((1, 1), dtype=a.dtype)
        out_idx = np.empty(m, dtype=np.int64)
        out_val = np.empty(m, dtype=a.dtype)
        yn = ynorms

    ranges = _k.split_ranges(nbi, threads)
    cap = inj_bi.shape[0] + 64
    buffers = []
    for _ in ranges:
        fbuf = np.zeros(1, dtype=a.dtype)
        ibuf = fbuf.view(np.uint32 if a.dtype == np.float32 else np.uint64)
        buffers.append(
            (
                np.zeros((cap, _k.EV_COLS), dtype=np.int64),
                np.zeros(cap, dtype=np.float64),
                np.zeros(1, dtype=np.int64),
                fbuf,
                ibuf,
            )
        )

    def run(worker, lo, hi):
        ev_rec, ev_delta, ev_count, fbuf, ibuf = buffers[worker]
        return _k._checked_range(
            a, b, yn, out, out_idx, out_val, 1 if materialize else 0,
            bm, bn, bk, sm, sn, um,
            lo, hi, delta_rel, abs_tol, iteration,
            inj_bi, inj_bj, inj_ei, inj_ej, inj_bit,
            inj_applied, inj_before, inj_after,
            ev_rec, ev_delta, ev_count, fbuf, ibuf,
        )

    if len(ranges) == 1:
        overflows = [run(0, *ranges[0])]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
            futures = [pool.submit(run, w, lo, hi) for w, (lo, hi) in enumerate(ranges)]
            overflows = [f.result() for f in futures]
    if any(overflows):
        raise RuntimeError("detection event buffer overflow; threshold likely miscalibrated")

    events = []
    for ev_rec, ev_delta, ev_count, _, _ in buffers:
        n = int(ev_count[0])
        for r in range(n):
            rec = ev_rec[r]
            events.append(
                DetectionEvent(
                    iteration=int(rec[0]),
                    tile=(int(rec[1]), int(rec[2])),
                    kind=KIND_NAMES[int(rec[3])],
                    loc=(int(rec[4]), int(rec[5])),
                    delta=float(ev_delta[r]),
                    interval=int(rec[6]),
                )
            )
    events.sort(key=lambda e: (e.iteration, e.tile, e.interval))
    report = DetectionReport(events=events)
    scheduled = {(int(bi_), int(bj_)) for bi_, bj_ in zip(inj_bi, inj_bj)}
    report.false_alarms = sum(1 for e in events if e.tile not in scheduled)
    if hook is not None:
        hook.absorb_kernel_results(iteration, inj_applied, inj_before, inj_after)
    if materialize:
        return out, report
    return AssignResult(assignments=out_idx, min_dists=out_val), report


def checked_gemm(a, b, cfg=None, thr=None, hook=None, iteration=0, threads=None):
    """Checksum-protected ``a @ b.T``.

    Fault-free runs return the exact bits :func:`ftkmeans.gemm.gemm_tiled`
    would (the protection never touches the main accumulation path). Single
    per-tile-interval corruptions are corrected in place before the tile is
    consumed; anything beyond that is flagged detected-uncorrectable in the
    report, never silently wrong within the single-upset model.
    """
    a, b, cfg = _check_pair(a, b, cfg)
    return _checked_run(a, b, cfg, thr, hook, iteration, threads, None, materialize=True)


def checked_assign(x, y, y_norms=None, cfg=None, thr=None, hook=None, iteration=0, threads=None):
    """Fused nearest-centroid assignment over checksum-protected distance tiles."""
    x, y, cfg = _check_pair(x, y, cfg)
    if y_norms is None:
        y_norms = row_sq_norms(y)
    y_norms = np.ascontiguousarray(y_norms, dtype=x.dtype)
    if y_norms.shape != (y.shape[0],):
        raise ValueError(f"y_norms must have length {y.shape[0]}")
    return _checked_run(x, y, cfg, thr, hook, iteration, threads, y_norms, materialize=False)


def dmr_reduce(values, init=0.0, op="sum", hook=None, iteration=0, site=(0, 0), _chunk=4096):
    """Duplicated deterministic reduction with bitwise comparison.

    Returns ``(result, mismatched)``. A mismatch triggers one deterministic
    re-execution; a second disagreement violates the single-upset model and
    raises :class:`FaultEscalationError`.
    """
    if op != "sum":
        raise ValueError(f"unsupported reduction op {op!r}")
    v = np.asarray(values, dtype=np.float64).ravel()

    def once(corrupt):
        acc_a = np.float64(init)
        acc_b = np.float64(init)
        for lo in range(0, v.size, _chunk):
            s = np.add.reduce(v[lo : lo + _chunk], dtype=np.float64)
            acc_a += s
            acc_b += s
        if corrupt and hook is not None:
            buf = np.array([acc_a], dtype=np.float64)
            hook.maybe_corrupt(iteration, site, buf.reshape(1, 1))
            acc_a = buf[0]
        return acc_a, acc_b

    acc_a, acc_b = once(corrupt=True)
    first = acc_a
    mismatched = acc_a.tobytes() != acc_b.tobytes()
    if not mismatched:
        return float(acc_a), False
    # Re-execute in full, hook included: a transient fault does not recur,
    # a persistent one violates the single-upset model.
    acc_a, acc_b = once(corrupt=True)
    if acc_a.tobytes() != acc_b.tobytes():
        raise FaultEscalationError(
            f"DMR mismatch persisted after retry at site {site} (got {first!r} then {acc_a!r})"
        )
    return float(acc_a), True
